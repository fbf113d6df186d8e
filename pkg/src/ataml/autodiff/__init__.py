"""Reverse-mode automatic differentiation with gradients of gradients."""

from . import ops
from .grad import GradMap, backward, backward_through_backward, grad
from .optim import Adam, AdamState, adam_step, clip_global_norm, global_norm_value
from .tensor import (
    ContractViolation,
    Node,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    debug_checks,
    enable_grad,
    no_grad,
)

__all__ = [
    "Adam",
    "AdamState",
    "ContractViolation",
    "GradMap",
    "Node",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "backward_through_backward",
    "clip_global_norm",
    "debug_checks",
    "enable_grad",
    "global_norm_value",
    "grad",
    "no_grad",
    "ops",
]
