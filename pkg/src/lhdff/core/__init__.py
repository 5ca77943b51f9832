from . import functional
from .functional import DegenerateStatisticsError
from .optim import AdamState, NonFiniteGradientError, adam_step, clip_grad_norm
from .tensor import (
    GradientTape,
    NonFiniteError,
    ShapeError,
    StaleTapeError,
    Tensor,
    float64_mode,
    get_default_dtype,
    set_default_dtype,
)

__all__ = [
    "AdamState",
    "DegenerateStatisticsError",
    "GradientTape",
    "NonFiniteError",
    "NonFiniteGradientError",
    "ShapeError",
    "StaleTapeError",
    "Tensor",
    "adam_step",
    "clip_grad_norm",
    "float64_mode",
    "functional",
    "get_default_dtype",
    "set_default_dtype",
]
