"""ResCAL residual estimator g.

The encoder runs ``layers`` spatio-temporal blocks (gated TCN followed by a
diffusion GCN, or by a pointwise convolution when there is no graph) over the
channel-wise concatenation of the graph signal X (B, N, 2, T) and the window
of newly observed residuals U (B, N, T_u, T). The final time step becomes the
latent Z (B, N, d_h), which feeds two branches:

* regression: f_r(Z) in R^{d_e}
* quantization: logits W = f_q(Z), split into d_c blocks of n_c categories,
  each turned into a one-hot vector by the straight-through Gumbel estimator;
  Q E^T sums the selected codebook columns.

The residual estimate is f_o(f_r(Z) + Q E^T) with one value per horizon.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graph as G
from .autograd import tensor as T
from .autograd.nn import Module, PointwiseConv, uniform_param
from .autograd.optim import AdamState, adam_step
from .autograd.rng import Rng
from .autograd.tensor import Tensor, backward, custom_op, no_grad
from .data import SeriesDataset
from .errors import ContractError, ShapeError
from .models import GatedTCN, ForecastLog

log = logging.getLogger(__name__)

GUMBEL_MODES = ("sample", "argmax")


@dataclass
class RescalConfig:
    window: int = 12
    layers: int = 4
    hidden: int = 32
    kernel: int = 2
    dilations: tuple = (1, 2, 4, 8)
    d_c: int = 32
    n_c: int = 16
    d_e: int = 16
    tau: float = 1.0
    order: int = 2
    embed_dim: int = 10
    batch: int = 256
    lr: float = 1e-3
    epochs: int = 20
    quantize: bool = True
    use_graph: bool = True
    gumbel_mode: str = "sample"

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if len(self.dilations) != self.layers:
            raise ContractError(f"RescalConfig: {self.layers} layers but {len(self.dilations)} dilations")
        if self.tau <= 0:
            raise ContractError("RescalConfig: tau must be positive")
        if self.gumbel_mode not in GUMBEL_MODES:
            raise ContractError(f"RescalConfig: gumbel_mode must be one of {GUMBEL_MODES}")
        if min(self.window, self.hidden, self.d_c, self.n_c, self.d_e, self.batch, self.epochs) < 1:
            raise ContractError("RescalConfig: sizes must be positive")

    @property
    def horizon(self) -> int:
        """T_u = T_y = T."""
        return self.window

    @property
    def code_width(self) -> int:
        return self.d_c * self.n_c


def st_gumbel(logits: Tensor, tau: float = 1.0, rng: Rng | None = None, noise: np.ndarray | None = None) -> Tensor:
    """Straight-through Gumbel-softmax over the last axis.

    Forward: one_hot(argmax(logits + g)) with g ~ Gumbel(0, 1) (g = 0 when
    neither ``rng`` nor ``noise`` is given). Backward: the Jacobian of
    softmax((logits + g) / tau).
    """
    if tau <= 0:
        raise ContractError("st_gumbel: tau must be positive")
    if noise is None:
        noise = rng.gumbel(logits.shape) if rng is not None else np.zeros(logits.shape)
    y = logits.data.astype(np.float64) + noise
    idx = np.argmax(y, axis=-1)
    hard = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(hard, idx[..., None], 1, axis=-1)
    z = (y - y.max(axis=-1, keepdims=True)) / tau
    soft = np.exp(z)
    soft /= soft.sum(axis=-1, keepdims=True)
    soft = soft.astype(logits.dtype)

    def vjp(g):
        return ((soft * (g - (g * soft).sum(axis=-1, keepdims=True)) / tau).astype(g.dtype),)

    return custom_op(hard, (logits,), vjp, "st_gumbel")


class ResCAL(Module):
    def __init__(self, config: RescalConfig, n_nodes: int, fixed_supports=None, rng: Rng | None = None):
        rng = rng or Rng(0)
        self.config = config
        self.n_nodes = n_nodes
        c = config
        d = c.hidden
        graph = c.use_graph and fixed_supports is not None
        self.fixed_supports = [np.asarray(P, dtype=np.float32) for P in (fixed_supports or [])] if graph else []
        self.start = PointwiseConv(2 + c.horizon, d, rng)
        self.embeddings = G.NodeEmbeddings(n_nodes, c.embed_dim, rng) if graph else None
        n_sup = len(self.fixed_supports) + (1 if graph else 0)
        self.tcn = [GatedTCN(d, d, c.kernel, dil, rng) for dil in c.dilations]
        if graph:
            self.mix = [G.GraphConv(d, d, n_sup, c.order, rng) for _ in c.dilations]
        else:
            self.mix = [PointwiseConv(d, d, rng) for _ in c.dilations]
        self.f_q = [PointwiseConv(d, d, rng, axis=-1), PointwiseConv(d, d, rng, axis=-1),
                    PointwiseConv(d, c.code_width, rng, axis=-1)]
        self.f_r = [PointwiseConv(d, d, rng, axis=-1), PointwiseConv(d, c.d_e, rng, axis=-1)]
        self.codebook = uniform_param((c.d_e, c.code_width), c.d_c, rng)
        self.f_o = [PointwiseConv(c.d_e, d, rng, axis=-1), PointwiseConv(d, c.horizon, rng, axis=-1)]

    @property
    def graph(self) -> bool:
        return self.embeddings is not None

    def trainable(self) -> list:
        """Parameters the optimiser updates (the quantization branch drops out when disabled)."""
        skip = set()
        if not self.config.quantize:
            skip = {id(p) for layer in self.f_q for p in layer.parameters()} | {id(self.codebook)}
        return [p for p in self.parameters() if id(p) not in skip]

    def supports(self):
        if not self.graph:
            return None
        sup = [Tensor._wrap(P) for P in self.fixed_supports]
        sup.append(G.self_adaptive_adjacency(self.embeddings))
        return sup

    def encode(self, X, U) -> Tensor:
        """Z = Encoder(Concat(X, U)) for X (B, N, 2, T) and U (B, N, T_u, T)."""
        X = np.asarray(X, dtype=np.float32)
        U = np.asarray(U, dtype=np.float32)
        c = self.config
        if X.ndim != 4 or U.ndim != 4:
            raise ShapeError(f"encode: expected 4-D X and U, got {X.shape} and {U.shape}")
        if X.shape[:2] != U.shape[:2] or X.shape[3] != U.shape[3]:
            raise ShapeError(f"encode: X {X.shape} and U {U.shape} disagree on batch, nodes or time")
        if X.shape[2] != 2 or U.shape[2] != c.horizon or X.shape[3] != c.window:
            raise ShapeError(f"encode: expected X (B, N, 2, {c.window}) and U (B, N, {c.horizon}, {c.window})")
        if self.graph and X.shape[1] != self.n_nodes:
            raise ShapeError(f"encode: {X.shape[1]} nodes, module built for {self.n_nodes}")
        x = self.start(Tensor._wrap(np.concatenate([X, U], axis=2)))
        sup = self.supports()
        for tcn, mix in zip(self.tcn, self.mix):
            h = tcn(x)
            h = mix(h, sup) if self.graph else mix(h)
            x = x + h
        return x[:, :, :, -1]

    def quantize(self, Z: Tensor, rng: Rng | None = None, mode: str | None = None):
        """Return (Q, W, codes); ``codes`` is (B, N, d_c) category indices."""
        c = self.config
        mode = mode or c.gumbel_mode
        w = Z
        for i, layer in enumerate(self.f_q):
            w = layer(w)
            if i < len(self.f_q) - 1:
                w = T.relu(w)
        B, N = Z.shape[:2]
        blocks = T.reshape(w, (B, N, c.d_c, c.n_c))
        q = st_gumbel(blocks, c.tau, rng if mode == "sample" else None)
        codes = np.argmax(q.data, axis=-1)
        return T.reshape(q, (B, N, c.code_width)), w, codes

    def estimate_residual(self, Z: Tensor, Q: Tensor | None) -> Tensor:
        r = T.relu(self.f_r[0](Z))
        r = self.f_r[1](r)
        if Q is not None:
            r = r + T.matmul(Q, T.transpose(self.codebook))
        o = T.relu(self.f_o[0](r))
        return self.f_o[1](o)

    def forward(self, X, U, rng: Rng | None = None, mode: str | None = None):
        Z = self.encode(X, U)
        if self.config.quantize:
            Q, _, codes = self.quantize(Z, rng, mode)
        else:
            Q, codes = None, None
        return self.estimate_residual(Z, Q), codes

    def predict(self, X, U, rng: Rng | None = None, mode: str | None = None):
        with no_grad():
            R, codes = self.forward(X, U, rng, mode)
        return R.data, codes

    def buffers(self) -> dict:
        return {f"support.{i}": P for i, P in enumerate(self.fixed_supports)}


def calibrate(y_pred, r_hat):
    """Final output Y_hat + R_hat (normalised space)."""
    y_pred = np.asarray(y_pred)
    r_hat = np.asarray(r_hat)
    if y_pred.shape != r_hat.shape:
        raise ShapeError(f"calibrate: prediction {y_pred.shape} and residual {r_hat.shape} differ")
    return y_pred + r_hat


def rescal_checkpoint(module: ResCAL) -> dict:
    state = {f"param.{k}": v for k, v in module.state_dict().items()}
    state.update({f"buffer.{k}": v for k, v in module.buffers().items()})
    return state


def load_rescal_checkpoint(config: RescalConfig, n_nodes: int, state: dict) -> ResCAL:
    params = {k[len("param."):]: v for k, v in state.items() if k.startswith("param.")}
    n_sup = sum(k.startswith("buffer.support.") for k in state)
    supports = [state[f"buffer.support.{i}"] for i in range(n_sup)] if n_sup else None
    if config.use_graph and supports is None and any(k.startswith("embeddings.") for k in params):
        supports = []
    module = ResCAL(config, n_nodes, supports, Rng(0))
    module.load_state_dict(params)
    return module


# ------------------------------------------------------------------ training


@dataclass
class RescalSamples:
    """Stacked training inputs for one split."""

    t: np.ndarray
    X: np.ndarray  # (S, N, 2, T)
    U: np.ndarray  # (S, N, T_u, T)
    R: np.ndarray  # (S, N, T_y) target residuals
    R_mask: np.ndarray

    def __len__(self):
        return len(self.t)


def build_samples(flog: ForecastLog, dataset: SeriesDataset, split: str, window: int) -> RescalSamples:
    """Assemble (X, U, R) for every post-warm-up step of a split from the offline log."""
    from .replay import offline_residual_windows, warmup_steps

    lo, hi = dataset.split_range(split)
    horizon = flog.horizon
    if horizon != window:
        raise ContractError(f"build_samples: forecast horizon {horizon} != ResCAL window {window}")
    sub = flog.for_split(split)
    expected = np.arange(lo + window - 1, hi)
    if len(sub.t) != len(expected) or np.any(sub.t != expected):
        bad = next((int(e) for e, s in zip(expected, sub.t) if e != s), int(expected[min(len(sub.t), len(expected) - 1)]))
        raise ContractError(f"forecast log misaligned with dataset split '{split}' at t={bad}")
    U, _ = offline_residual_windows(flog, dataset, split, window)
    W = warmup_steps(window, window)
    local = np.arange(W, hi - lo)
    sig = dataset.signal()[lo:hi]
    idx = local[:, None] + np.arange(-window + 1, 1)[None, :]
    X = sig[idx].transpose(0, 2, 3, 1)
    li = local - (window - 1)
    R = sub.y_true[li] - sub.y_pred[li]
    M = sub.observed[li] & ~np.isnan(sub.y_true[li])
    return RescalSamples(local + lo, np.ascontiguousarray(X, dtype=np.float32), U[local],
                         np.where(M, R, 0).astype(np.float32), M)


def masked_mae(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    m = mask.astype(np.float32)
    return T.sum(T.abs(pred - Tensor._wrap(target)) * m) * (1.0 / max(float(m.sum()), 1.0))


def _mae(module, s: RescalSamples, rng: Rng, batch=512) -> float:
    err = 0.0
    for i in range(0, len(s), batch):
        R, _ = module.predict(s.X[i:i + batch], s.U[i:i + batch], rng)
        err += float(np.sum(np.abs(R - s.R[i:i + batch]) * s.R_mask[i:i + batch], dtype=np.float64))
    return err / max(int(s.R_mask.sum()), 1)


@dataclass
class RescalHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0


def train_rescal(flog: ForecastLog, dataset: SeriesDataset, supports, config: RescalConfig, seed=0):
    """Minimise masked MAE between estimated and realised residuals.

    ``dataset`` must be the normalised dataset the log was produced on;
    ``supports`` are fixed transition matrices (None for the 1-D encoder).
    Returns the best-validation module and its training history.
    """
    rng = seed if isinstance(seed, Rng) else Rng(seed, (1,))
    module = ResCAL(config, dataset.n_nodes, supports if config.use_graph else None, rng.child(0))
    train = build_samples(flog, dataset, "train", config.window)
    val = build_samples(flog, dataset, "val", config.window)
    if len(train) == 0 or len(val) == 0:
        raise ContractError("train_rescal: no post-warm-up samples in train or val split")
    params = module.trainable()
    state = AdamState(lr=config.lr)
    order_rng, noise_rng = rng.child(1), rng.child(2)
    history = RescalHistory()
    best, best_state = math.inf, None
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(train))
        total, count = 0.0, 0
        for i in range(0, len(perm), config.batch):
            idx = np.sort(perm[i:i + config.batch])
            R, _ = module.forward(train.X[idx], train.U[idx], noise_rng, "sample")
            loss = masked_mae(R, train.R[idx], train.R_mask[idx])
            backward(loss)
            adam_step(params, state)
            total += loss.item() * len(idx)
            count += len(idx)
        val_loss = _mae(module, val, rng.child(3, epoch))
        history.train_loss.append(total / count)
        history.val_loss.append(val_loss)
        if val_loss < best:
            best, best_state, history.best_epoch = val_loss, module.state_dict(), epoch
        log.info("rescal epoch %d train %.5f val %.5f", epoch, total / count, val_loss)
    module.load_state_dict(best_state)
    history.seconds = time.perf_counter() - t0
    return module, history


def config_dict(config) -> dict:
    return asdict(config)
