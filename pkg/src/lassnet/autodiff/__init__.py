"""Minimal reverse-mode autodiff engine with the ops the separator needs."""

from . import ops
from .gradcheck import check_gradients, numeric_grad, relative_error
from .optim import Adam, AdamState, NonFiniteGradientError, adam_step
from .tensor import Tape, Tensor, active_tape, as_tensor, backward, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "NonFiniteGradientError",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "as_tensor",
    "backward",
    "check_gradients",
    "no_grad",
    "numeric_grad",
    "ops",
    "relative_error",
]
