"""Reverse-mode differentiable array engine on top of numpy."""

from . import ops
from .nn import Conv2d, Linear, Module, Parameter, spectral_normalize
from .optim import Adam, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    get_default_dtype,
    grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "Adam",
    "Conv2d",
    "Linear",
    "Module",
    "Parameter",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "get_default_dtype",
    "grad_enabled",
    "no_grad",
    "ops",
    "precision",
    "set_default_dtype",
    "spectral_normalize",
]
