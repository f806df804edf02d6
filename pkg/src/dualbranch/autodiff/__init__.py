"""Minimal dense tensors with reverse-mode automatic differentiation."""

from . import ops
from .nn import MLP, Conv2d, Linear, Module, Parameter, ZeroConv2d
from .ops import forward_op
from .optim import Adam, AdamConfig
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    checked,
    default_dtype,
    get_dtype,
    no_grad,
    set_dtype,
)

__all__ = [
    "Adam",
    "AdamConfig",
    "Conv2d",
    "Linear",
    "MLP",
    "Module",
    "NonFiniteError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "ZeroConv2d",
    "as_tensor",
    "backward",
    "checked",
    "default_dtype",
    "forward_op",
    "get_dtype",
    "no_grad",
    "ops",
    "set_dtype",
]
