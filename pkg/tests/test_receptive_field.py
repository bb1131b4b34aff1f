from fractions import Fraction

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from fcdrn.blocks import Conv2d
from fcdrn.builder import ChannelPlan, build, surgery_to_dilated
from fcdrn.receptive_field import compute_receptive_field, impulse_support, layer_list_rf


def test_single_conv():
    assert compute_receptive_field([Conv2d(1, 1, 3)])["output"]["rf"] == 3
    assert compute_receptive_field([Conv2d(1, 1, 3, dilation=2)])["output"]["rf"] == 5


def test_known_chain():
    chain = [(3, 1, 1), (2, 2, 1), (3, 1, 2), (3, 2, 1), (3, 1, 4)]
    rf, jump = layer_list_rf(chain)
    assert (rf, jump) == (48, 4)
    assert impulse_support(chain) == 48


def test_upsample_halves_jump():
    rf, jump = layer_list_rf([(2, 2, 1), (1, Fraction(1, 2), 1), (3, 1, 1)])
    assert jump == 1 and rf == 4


layer = st.one_of(
    st.tuples(st.sampled_from([1, 3]), st.just(1), st.sampled_from([1, 2, 4])),
    st.tuples(st.just(3), st.just(2), st.just(1)),
    st.just((2, 2, 1)),
)


@given(st.lists(layer, min_size=1, max_size=5))
def test_recurrence_matches_impulse_response(chain):
    rf, _ = layer_list_rf(chain)
    assert impulse_support(chain) == rf


def test_model_report():
    m = build("P", ChannelPlan(scale=0.25), blocks_per_stage=1)
    rep = compute_receptive_field(m)
    assert list(rep) == ["IDB"] + [f"R{i}" for i in range(1, 10)] + ["FUB", "classifier"]
    assert rep["IDB"]["downsample"] == 2
    assert rep["R5"]["downsample"] == 32
    assert rep["classifier"]["downsample"] == 1
    rfs = [rep[f"R{i}"]["rf"] for i in range(1, 10)]
    assert rfs == sorted(rfs)


def test_dilation_keeps_resolution_in_report():
    m = build("P", ChannelPlan(scale=0.25), blocks_per_stage=1)
    pd = surgery_to_dilated(m)
    rep = compute_receptive_field(pd)
    assert rep["R5"]["downsample"] == 8
    assert rep["classifier"]["downsample"] == 1
    assert np.isfinite(rep["classifier"]["rf"])
