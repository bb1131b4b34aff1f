import numpy as np
import pytest
from hypothesis import settings

from fcdrn import ChannelPlan, build

settings.register_profile("fcdrn", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("fcdrn")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_plan():
    return ChannelPlan(scale=0.1)


@pytest.fixture
def tiny_model(tiny_plan):
    return build("P", tiny_plan, seed=3, blocks_per_stage=2)


@pytest.fixture(scope="session")
def tiny_data():
    from fcdrn.data import SyntheticSpec, synthetic_splits

    return synthetic_splits(SyntheticSpec(n=8, size=32, classes=3, seed=0), 4)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
