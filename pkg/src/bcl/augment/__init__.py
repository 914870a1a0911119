from .ops import (
    DEFAULT_MAGNITUDES,
    OP_NAMES,
    PARAMETER_FREE,
    UnknownOpError,
    apply_op,
    load_magnitude_table,
    magnitude,
    with_overrides,
)
from .views import (
    NO_OP_VIEW,
    AugPolicy,
    ViewConfig,
    base_view,
    base_views,
    boosted_augment,
    dataset_fill,
    fixed_augment,
    view_rng,
)

__all__ = [
    "AugPolicy",
    "DEFAULT_MAGNITUDES",
    "NO_OP_VIEW",
    "OP_NAMES",
    "PARAMETER_FREE",
    "UnknownOpError",
    "ViewConfig",
    "apply_op",
    "base_view",
    "base_views",
    "boosted_augment",
    "dataset_fill",
    "fixed_augment",
    "load_magnitude_table",
    "magnitude",
    "view_rng",
    "with_overrides",
]
