"""Adjacency construction and diffusion graph convolution."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autograd import tensor as T
from .autograd.nn import Module, uniform_param, zeros_param
from .autograd.rng import Rng
from .autograd.tensor import Tensor
from .errors import ContractError, ParseError, ShapeError


@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    weights: np.ndarray
    kind: str  # "distance-kernel" | "self-adaptive" | "identity"

    @property
    def n(self) -> int:
        return self.weights.shape[0]


def build_gaussian_adjacency(distances, kappa: float = 0.1) -> AdjacencyMatrix:
    """w_ij = exp(-d_ij^2 / sigma^2), zeroed below ``kappa``; unit diagonal.

    sigma is the standard deviation of all finite entries of ``distances``
    (the zero diagonal included). Unconnected pairs carry +inf.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ContractError(f"distance matrix must be square, got shape {d.shape}")
    if not 0.0 <= kappa < 1.0:
        raise ContractError(f"kappa must lie in [0, 1), got {kappa}")
    if np.any(d < 0):
        raise ContractError("distances must be non-negative")
    if np.any(np.isnan(d)):
        raise ContractError("distances must not be NaN")
    if np.any(np.diag(d) != 0):
        raise ContractError("distance matrix must have a zero diagonal")
    finite = np.isfinite(d)
    sigma = d[finite].std()
    w = np.zeros_like(d)
    if sigma > 0:
        w[finite] = np.exp(-np.square(d[finite] / sigma))
    else:
        w[finite] = 1.0
    w[w < kappa] = 0.0
    np.fill_diagonal(w, 1.0)
    return AdjacencyMatrix(w.astype(np.float32), "distance-kernel")


def identity_adjacency(n: int) -> AdjacencyMatrix:
    return AdjacencyMatrix(np.eye(n, dtype=np.float32), "identity")


def transition_matrices(adj: AdjacencyMatrix):
    """Row-normalised forward (A) and backward (A^T) diffusion matrices."""
    w = np.asarray(adj.weights, dtype=np.float64)
    out = []
    for m in (w, w.T):
        rows = m.sum(axis=1, keepdims=True)
        if np.any(rows <= 0):
            raise ContractError("adjacency has a zero row; every node needs a self-loop")
        out.append((m / rows).astype(np.float32))
    return out[0], out[1]


def load_distance_csv(path, vocab: dict) -> np.ndarray:
    """Triples ``from_id,to_id,distance_meters`` -> N x N matrix (+inf if absent)."""
    n = len(vocab)
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (lineno == 1 and row[0].strip() == "from_id"):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", path, lineno)
            a, b, dist = (x.strip() for x in row)
            for node in (a, b):
                if node not in vocab:
                    raise ParseError(f"unknown node id {node!r}", path, lineno)
            try:
                d[vocab[a], vocab[b]] = float(dist)
            except ValueError:
                raise ParseError(f"bad distance {dist!r}", path, lineno) from None
    return d


def write_distance_csv(path, distances: np.ndarray, node_ids) -> None:
    with open(path, "w") as fh:
        fh.write("from_id,to_id,distance_meters\n")
        for i, a in enumerate(node_ids):
            for j, b in enumerate(node_ids):
                if np.isfinite(distances[i, j]):
                    fh.write(f"{a},{b},{float(distances[i, j])!r}\n")


class NodeEmbeddings(Module):
    """Two N x d_n source/target embeddings for the learned adjacency."""

    def __init__(self, n_nodes: int, dim: int, rng: Rng):
        self.e1 = uniform_param((n_nodes, dim), dim, rng)
        self.e2 = uniform_param((n_nodes, dim), dim, rng)


def self_adaptive_adjacency(emb: NodeEmbeddings) -> Tensor:
    """softmax(relu(E1 E2^T)) row-wise; differentiable in both embeddings."""
    if emb.e1.shape != emb.e2.shape:
        raise ShapeError(f"node embeddings disagree: {emb.e1.shape} vs {emb.e2.shape}")
    return T.softmax(T.relu(T.matmul(emb.e1, T.transpose(emb.e2))), axis=-1)


def diffuse(x: Tensor, P) -> Tensor:
    """Mix node features: (P x)[b, n] = sum_m P[n, m] x[b, m] for x of shape (B, N, C, L)."""
    B, N, C, L = x.shape
    Pt = P if isinstance(P, Tensor) else Tensor._wrap(np.asarray(P, dtype=x.dtype))
    if Pt.shape != (N, N):
        raise ShapeError(f"graph_conv: support of shape {Pt.shape} does not match {N} nodes")
    flat = T.reshape(x, (B, N, C * L))
    return T.reshape(T.matmul(Pt, flat), (B, N, C, L))


def graph_conv(x: Tensor, supports, weight: Tensor, bias: Tensor | None = None, order: int = 2) -> Tensor:
    """Diffusion convolution on x of shape (B, N, C, L).

    Concatenates ``x`` and ``P^k x`` for every support P and k = 1..order along
    the channel axis and applies a pointwise convolution with ``weight`` of
    shape (C_out, C * (len(supports) * order + 1)).
    """
    if order < 1:
        raise ContractError(f"diffusion order must be >= 1, got {order}")
    if x.ndim != 4:
        raise ShapeError(f"graph_conv: expected (B, N, C, L) input, got {x.shape}")
    C = x.shape[2]
    blocks = len(supports) * order + 1
    if weight.shape[1] != C * blocks:
        raise ShapeError(f"graph_conv: weight {weight.shape} needs {C * blocks} input channels for {blocks} blocks")
    feats = [x]
    for P in supports:
        h = x
        for _ in range(order):
            h = diffuse(h, P)
            feats.append(h)
    return T.pointwise_conv(T.concat(feats, axis=2), weight, bias, axis=2)


class GraphConv(Module):
    def __init__(self, c_in: int, c_out: int, n_supports: int, order: int, rng: Rng):
        width = c_in * (n_supports * order + 1)
        self.weight = uniform_param((c_out, width), width, rng)
        self.bias = zeros_param((c_out,))
        self.order = order

    def __call__(self, x: Tensor, supports) -> Tensor:
        return graph_conv(x, supports, self.weight, self.bias, self.order)
