"""Minimal reverse-mode autodiff engine, Adam, seeded RNG and checkpoints."""

from . import checkpoint
from .nn import CausalConv1d, Linear, Module, PointwiseConv
from .optim import AdamState, adam_step
from .rng import Rng
from .tensor import Tensor, backward, no_grad

__all__ = [
    "AdamState",
    "CausalConv1d",
    "Linear",
    "Module",
    "PointwiseConv",
    "Rng",
    "Tensor",
    "adam_step",
    "backward",
    "checkpoint",
    "no_grad",
]
