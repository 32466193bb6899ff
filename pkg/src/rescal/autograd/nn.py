"""Parameter containers and the basic learnable layers."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ContractError
from . import tensor as T
from .rng import Rng
from .tensor import Tensor


def uniform_param(shape, fan_in: int, rng: Rng) -> Tensor:
    """uniform(-a, a) with a = sqrt(1 / fan_in)."""
    a = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-a, a, size=tuple(shape)), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Walks attributes in assignment order to find parameters and submodules."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise ContractError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ContractError(f"state '{name}': shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """y = x @ W + b over the last axis; W is (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: Rng):
        self.weight = uniform_param((n_in, n_out), n_in, rng)
        self.bias = zeros_param((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class PointwiseConv(Module):
    """1x1 convolution over a channel axis (default: second to last)."""

    def __init__(self, c_in: int, c_out: int, rng: Rng, axis: int = -2):
        self.weight = uniform_param((c_out, c_in), c_in, rng)
        self.bias = zeros_param((c_out,))
        self.axis = axis

    def __call__(self, x: Tensor) -> Tensor:
        return T.pointwise_conv(x, self.weight, self.bias, axis=self.axis)


class CausalConv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int, rng: Rng):
        self.weight = uniform_param((c_out, c_in, kernel), c_in * kernel, rng)
        self.bias = zeros_param((c_out,))
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, dilation=self.dilation)
