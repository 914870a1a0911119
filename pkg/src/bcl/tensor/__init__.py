from . import nn, ops
from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .core import (
    DetachedError,
    GradTape,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    get_default_dtype,
    no_grad,
    set_default_dtype,
)
from .optim import SGD, Adam, CosineSchedule, Optimizer

__all__ = [
    "Adam",
    "CheckpointError",
    "CosineSchedule",
    "DetachedError",
    "GradTape",
    "NonFiniteError",
    "Optimizer",
    "SGD",
    "ShapeError",
    "Tensor",
    "backward",
    "get_default_dtype",
    "load_checkpoint",
    "nn",
    "no_grad",
    "ops",
    "read_manifest",
    "save_checkpoint",
    "set_default_dtype",
]
