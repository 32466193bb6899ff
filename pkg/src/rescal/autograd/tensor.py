"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a numpy array (float32 by default). Every operation in
this module returns a new tensor and, when gradients are enabled and one of
the inputs requires them, links the result to its inputs together with a
closure computing the vector-Jacobian product. :func:`backward` walks that
dynamic tape in reverse topological order and releases it afterwards.

Reductions accumulate in float64 and cast back to the storage dtype. Passing
``dtype=np.float64`` at construction runs the same code path in double
precision, which is what the finite-difference oracle relies on.
"""

from __future__ import annotations

import builtins
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NumericDomainError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "conv1d",
    "pointwise_conv",
    "concat",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "sum",
    "mean",
    "abs",
    "slice",
    "reshape",
    "transpose",
    "embedding",
    "custom_op",
]

_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or np.float32)
        if not np.isfinite(arr).all():
            raise NumericDomainError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _make(out: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericDomainError(f"{op}: result contains NaN or Inf")
    t = Tensor._wrap(out)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = vjp
        t._op = op
    return t


def custom_op(out: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Register a hand-written operation on the tape.

    ``vjp(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    return _make(out, parents, vjp, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every tensor reachable from ``loss`` that requires it.

    Gradients of leaf tensors accumulate across calls; the tape is released.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar-shaped, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor requiring grad")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype)
            else:
                node.grad += g
            continue
        node.grad = g
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), vjp, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = (0.5 * (np.tanh(0.5 * a.data) + 1.0)).astype(a.dtype)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def abs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), vjp, "softmax")


# ----------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape
    count = a.data.size // max(np.asarray(out).size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(g.dtype, copy=True),)

    return _make(np.asarray(out), (a,), vjp, "mean")


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(np.matmul(ad, bd), (a, b), vjp, "matmul")


def pointwise_conv(x: Tensor, w: Tensor, bias: Tensor | None = None, axis: int = -2) -> Tensor:
    """1x1 convolution: mixes the channel axis ``axis`` of ``x`` with ``w`` (out, in)."""
    if w.ndim != 2:
        raise ShapeError(f"pointwise_conv: weight must be 2-D (out, in), got {w.shape}")
    ax = axis % x.ndim
    if x.shape[ax] != w.shape[1]:
        raise ShapeError(f"pointwise_conv: input channels {x.shape} (axis {axis}) do not match weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"pointwise_conv: bias shape {bias.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = np.moveaxis(np.tensordot(xd, wd, axes=([ax], [1])), -1, ax)
    bshape = [1] * x.ndim
    bshape[ax] = w.shape[0]
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    out = np.ascontiguousarray(out)
    parents = (x, w) if bias is None else (x, w, bias)

    def vjp(g):
        gm = np.moveaxis(g, ax, -1)
        gx = np.moveaxis(np.tensordot(gm, wd, axes=([gm.ndim - 1], [0])), -1, ax) if x.requires_grad else None
        lead = tuple(range(gm.ndim - 1))
        gw = np.tensordot(gm, np.moveaxis(xd, ax, -1), axes=(lead, lead)) if w.requires_grad else None
        if bias is None:
            return gx, gw
        gb = gm.reshape(-1, gm.shape[-1]).sum(axis=0, dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    return _make(out, parents, vjp, "pointwise_conv")


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Causal dilated convolution over the last axis.

    ``x`` is (..., C_in, T) and ``w`` is (C_out, C_in, K). The input is
    left-padded with ``(K - 1) * dilation`` zeros so the output keeps length T;
    tap ``k`` reads ``x[t - (K - 1 - k) * dilation]``.
    """
    if w.ndim != 3:
        raise ShapeError(f"conv1d: weight must be 3-D (out, in, k), got {w.shape}")
    if x.ndim < 2 or x.shape[-2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} does not match weight {w.shape}")
    if dilation < 1:
        raise ContractError(f"conv1d: dilation must be >= 1, got {dilation}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv1d: bias shape {bias.shape} does not match weight {w.shape}")
    O, C, K = w.shape
    T = x.shape[-1]
    lead = x.shape[:-2]
    pad = (K - 1) * dilation
    xd = x.data.reshape(-1, C, T)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, 0))) if pad else xd
    # im2col: rows ordered (tap, channel)
    cols = np.concatenate([xp[:, :, k * dilation:k * dilation + T] for k in range(K)], axis=1)
    w2 = w.data.transpose(0, 2, 1).reshape(O, K * C)
    out = np.tensordot(w2, cols, axes=([1], [1])).transpose(1, 0, 2)
    if bias is not None:
        out = out + bias.data[:, None]
    out = np.ascontiguousarray(out).reshape(lead + (O, T))
    parents = (x, w) if bias is None else (x, w, bias)

    def vjp(g):
        g3 = g.reshape(-1, O, T)
        gx = gw = None
        if x.requires_grad:
            gcols = np.tensordot(w2, g3, axes=([0], [1])).transpose(1, 0, 2)
            gxp = np.zeros((g3.shape[0], C, T + pad), dtype=g.dtype)
            for k in range(K):
                gxp[:, :, k * dilation:k * dilation + T] += gcols[:, k * C:(k + 1) * C]
            gx = gxp[:, :, pad:].reshape(x.shape)
        if w.requires_grad:
            gw2 = np.tensordot(g3, cols, axes=([0, 2], [0, 2]))
            gw = gw2.reshape(O, K, C).transpose(0, 2, 1).copy()
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype)

    return _make(out, parents, vjp, "conv1d")


def embedding(weight: Tensor, indices) -> Tensor:
    """Row lookup: ``weight[indices]`` with scatter-add backward."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("embedding: indices must be integers")
    if weight.ndim != 2:
        raise ShapeError(f"embedding: weight must be 2-D, got {weight.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ContractError(f"embedding: index out of range for table of {weight.shape[0]} rows")

    def vjp(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[idx], (weight,), vjp, "embedding")


# ------------------------------------------------------------------ structure


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def slice(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for item in idx:
        if not (item is None or item is Ellipsis or isinstance(item, (int, np.integer, builtins.slice))):
            raise ContractError(f"slice: only basic indexing is supported, got {type(item).__name__}")
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    try:
        out = a.data[idx]
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {shape}") from None
    return _make(np.ascontiguousarray(out), (a,), vjp, "slice")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = np.argsort([ax % a.ndim for ax in axes])
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose")
