"""FC-DRN: dense connectivity over residual networks for semantic segmentation."""
from .builder import (
    FCDRN,
    ChannelPlan,
    VariantSpec,
    build,
    build_dilated_from_scratch,
    count_parameters,
    describe,
    from_architecture,
    surgery_to_dilated,
)

__version__ = "0.1.0"

__all__ = [
    "FCDRN", "ChannelPlan", "VariantSpec", "build", "build_dilated_from_scratch", "count_parameters",
    "describe", "from_architecture", "surgery_to_dilated", "__version__",
]
