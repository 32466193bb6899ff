"""Central finite-difference gradient oracle.

The analytic gradient is taken from the float32 tape; the numerical one is
computed on float64 copies of the inputs, so the oracle never shares the
precision (or the backward code) of the path it checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grads(fn: Callable, arrays: Sequence[np.ndarray], eps: float = 1e-3) -> list:
    base = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for i, a in enumerate(base):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = fn([Tensor(x, dtype=np.float64) for x in base]).data.item()
            flat[j] = orig - eps
            fm = fn([Tensor(x, dtype=np.float64) for x in base]).data.item()
            flat[j] = orig
            gflat[j] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def analytic_grads(fn: Callable, arrays: Sequence[np.ndarray]) -> list:
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(inputs)
    backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), floor)
    return float(num / den)


def check_gradients(fn: Callable, arrays: Sequence[np.ndarray], eps: float = 1e-3) -> float:
    """Largest per-input relative error between analytic and numerical grads."""
    ana = analytic_grads(fn, arrays)
    num = numerical_grads(fn, arrays, eps=eps)
    return max(relative_error(a, n) for a, n in zip(ana, num))
