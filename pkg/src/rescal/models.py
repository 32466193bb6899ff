"""Base forecasters f: a GRU sequence-to-sequence model and a gated-TCN graph model.

Both expose ``predict(X)`` on windows shaped (B, N, 2, T_x) in normalised
units and return (B, N, T_y). :func:`train_base` fits either one with MSE,
keeps the best-validation weights and logs a prediction for every step of
every split.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graph as G
from .autograd import tensor as T
from .autograd.nn import CausalConv1d, Linear, Module, PointwiseConv, uniform_param, zeros_param
from .autograd.optim import AdamState, adam_step
from .autograd.rng import Rng
from .autograd.tensor import Tensor, backward, custom_op, no_grad
from .data import SPLITS, SeriesDataset, make_windows
from .errors import ContractError, ParseError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class Seq2seqConfig:
    input_len: int = 24
    output_len: int = 24
    hidden: int = 128
    mlp_dims: tuple = (128, 16, 1)
    epochs: int = 50
    batch: int = 100
    lr: float = 1e-3
    teacher_forcing: float = 0.5

    def __post_init__(self):
        self.mlp_dims = tuple(int(d) for d in self.mlp_dims)
        if min(self.input_len, self.output_len, self.hidden, self.epochs, self.batch) < 1:
            raise ContractError("Seq2seqConfig: all sizes must be positive")
        if not self.mlp_dims or self.mlp_dims[-1] != 1 or min(self.mlp_dims) < 1:
            raise ContractError(f"Seq2seqConfig: mlp_dims must be positive and end in 1, got {self.mlp_dims}")


@dataclass
class GraphForecasterConfig:
    input_len: int = 12
    output_len: int = 12
    channels: int = 32
    kernel: int = 2
    dilations: tuple = (1, 2, 4, 4)
    order: int = 2
    embed_dim: int = 10
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.receptive_field < self.input_len:
            raise ContractError(
                f"GraphForecasterConfig: receptive field {self.receptive_field} < input_len {self.input_len}")

    @property
    def layers(self) -> int:
        return len(self.dilations)

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations)


# --------------------------------------------------------------------- GRU


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def gru_cell(x: Tensor, h: Tensor, w_x: Tensor, w_h: Tensor, b_x: Tensor, b_h: Tensor) -> Tensor:
    """Fused GRU step: h_t = (1 - z) * h_prev + z * n.

    Gate blocks of the (., 3H) weights are ordered reset, update, candidate;
    the candidate is n = tanh(W_n x + b_n + r * (U_n h + c_n)).
    """
    H = h.shape[-1]
    if w_x.shape != (x.shape[-1], 3 * H) or w_h.shape != (H, 3 * H):
        raise ShapeError(f"gru_cell: weights {w_x.shape}, {w_h.shape} do not fit input {x.shape} and state {h.shape}")
    if x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_cell: batch of input {x.shape} differs from state {h.shape}")
    xd, hd = x.data, h.data
    gx = xd @ w_x.data + b_x.data
    gh = hd @ w_h.data + b_h.data
    r = _sigmoid(gx[:, :H] + gh[:, :H])
    z = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    ghn = gh[:, 2 * H:]
    n = np.tanh(gx[:, 2 * H:] + r * ghn)
    out = (1 - z) * hd + z * n

    def vjp(g):
        dz = g * (n - hd)
        dan = g * z * (1 - n * n)
        dar = dan * ghn * r * (1 - r)
        daz = dz * z * (1 - z)
        dgx = np.concatenate([dar, daz, dan], axis=1)
        dgh = np.concatenate([dar, daz, dan * r], axis=1)
        dx = dgx @ w_x.data.T if x.requires_grad else None
        dh = g * (1 - z) + dgh @ w_h.data.T
        return (
            dx,
            dh,
            xd.T @ dgx,
            hd.T @ dgh,
            dgx.sum(axis=0, dtype=np.float64).astype(g.dtype),
            dgh.sum(axis=0, dtype=np.float64).astype(g.dtype),
        )

    return custom_op(out.astype(hd.dtype), (x, h, w_x, w_h, b_x, b_h), vjp, "gru_cell")


def gru_cell_reference(x, h, w_x, w_h, b_x, b_h) -> Tensor:
    """Same cell assembled from primitive tape ops (used to cross-check the fused path)."""
    H = h.shape[-1]
    gx = T.matmul(x, w_x) + b_x
    gh = T.matmul(h, w_h) + b_h
    r = T.sigmoid(gx[:, :H] + gh[:, :H])
    z = T.sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    n = T.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
    return (1.0 - z) * h + z * n


class GRUCell(Module):
    def __init__(self, n_in: int, hidden: int, rng: Rng):
        self.w_x = uniform_param((n_in, 3 * hidden), n_in, rng)
        self.w_h = uniform_param((hidden, 3 * hidden), hidden, rng)
        self.b_x = zeros_param((3 * hidden,))
        self.b_h = zeros_param((3 * hidden,))
        self.hidden = hidden

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_cell(x, h, self.w_x, self.w_h, self.b_x, self.b_h)


class Seq2seq(Module):
    """GRU encoder/decoder with an MLP read-out applied at every decoder step.

    The encoder reads (speed, time-of-day); the decoder is fed its previous
    output (or, during training, the ground truth with probability
    ``teacher_forcing``), starting from the last observed speed.
    """

    kind = "seq2seq"
    n_nodes = None  # node-agnostic: nodes are folded into the batch

    def __init__(self, config: Seq2seqConfig, rng: Rng):
        self.config = config
        H = config.hidden
        self.encoder = GRUCell(2, H, rng)
        self.decoder = GRUCell(1, H, rng)
        dims = (H,) + config.mlp_dims
        self.head = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def input_len(self):
        return self.config.input_len

    @property
    def output_len(self):
        return self.config.output_len

    def _readout(self, h: Tensor) -> Tensor:
        for i, layer in enumerate(self.head):
            h = layer(h)
            if i < len(self.head) - 1:
                h = T.relu(h)
        return h

    def forward(self, X: np.ndarray, Y: np.ndarray | None = None, rng: Rng | None = None) -> Tensor:
        """X is (B, 2, T_x); returns a (B, T_y) tensor."""
        B, _, Tx = X.shape
        if Tx != self.input_len:
            raise ContractError(f"seq2seq: history length {Tx} != input_len {self.input_len}")
        X = np.asarray(X, dtype=np.float32)
        h = Tensor._wrap(np.zeros((B, self.config.hidden), dtype=np.float32))
        for t in range(Tx):
            h = self.encoder(Tensor._wrap(np.ascontiguousarray(X[:, :, t])), h)
        inp = Tensor._wrap(np.ascontiguousarray(X[:, 0, -1:]))
        outs = []
        tf = self.config.teacher_forcing if (Y is not None and rng is not None) else 0.0
        for k in range(self.output_len):
            h = self.decoder(inp, h)
            y = self._readout(h)
            outs.append(y)
            if tf > 0 and rng.random() < tf:
                inp = Tensor._wrap(np.ascontiguousarray(Y[:, k:k + 1], dtype=np.float32))
            else:
                inp = y
        return T.concat(outs, axis=1)

    def forecast(self, history) -> np.ndarray:
        """Single-series forecast: T_x (or T_x x 2) history -> T_y predictions."""
        h = np.asarray(history, dtype=np.float32)
        if h.ndim == 1:
            h = np.stack([h, np.zeros_like(h)], axis=0)
        elif h.ndim == 2 and h.shape[1] == 2:
            h = h.T
        if h.shape != (2, self.input_len):
            raise ContractError(f"seq2seq_forecast: expected history of length {self.input_len}, got {np.shape(history)}")
        with no_grad():
            return self.forward(h[None]).data[0]

    def train_forward(self, X, Y, rng):
        B, N = X.shape[:2]
        out = self.forward(X.reshape(B * N, 2, -1), Y.reshape(B * N, -1), rng)
        return T.reshape(out, (B, N, self.output_len))

    def predict(self, X: np.ndarray) -> np.ndarray:
        B, N = X.shape[:2]
        with no_grad():
            return self.forward(X.reshape(B * N, 2, -1)).data.reshape(B, N, self.output_len)

    def buffers(self) -> dict:
        return {}


def seq2seq_forecast(history, model: Seq2seq) -> np.ndarray:
    return model.forecast(history)


# ---------------------------------------------------------------- gated TCN


class GatedTCN(Module):
    """tanh(conv_a(x)) * sigmoid(conv_b(x)) with causal dilated convolutions."""

    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int, rng: Rng):
        self.conv_a = CausalConv1d(c_in, c_out, kernel, dilation, rng)
        self.conv_b = CausalConv1d(c_in, c_out, kernel, dilation, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return gated_tcn(x, self)


def gated_tcn(x: Tensor, params: GatedTCN) -> Tensor:
    return T.mul(T.tanh(params.conv_a(x)), T.sigmoid(params.conv_b(x)))


class GraphForecaster(Module):
    """Stacked gated-TCN + diffusion-GCN blocks with residual and skip paths.

    Supports are the fixed forward/backward transition matrices plus a
    self-adaptive adjacency learned from node embeddings.
    """

    kind = "graph"

    def __init__(self, config: GraphForecasterConfig, fixed_supports, rng: Rng):
        self.config = config
        self.fixed_supports = [np.asarray(P, dtype=np.float32) for P in fixed_supports]
        n = self.fixed_supports[0].shape[0] if self.fixed_supports else None
        C = config.channels
        self.start = PointwiseConv(2, C, rng)
        self.embeddings = G.NodeEmbeddings(n, config.embed_dim, rng) if n else None
        n_sup = len(self.fixed_supports) + (1 if self.embeddings else 0)
        self.tcn = [GatedTCN(C, C, config.kernel, d, rng) for d in config.dilations]
        self.gcn = [G.GraphConv(C, C, n_sup, config.order, rng) for _ in config.dilations]
        self.skip = [PointwiseConv(C, C, rng, axis=-1) for _ in config.dilations]
        self.end1 = PointwiseConv(C, C, rng, axis=-1)
        self.end2 = PointwiseConv(C, config.output_len, rng, axis=-1)

    @property
    def input_len(self):
        return self.config.input_len

    @property
    def output_len(self):
        return self.config.output_len

    @property
    def n_nodes(self):
        return self.fixed_supports[0].shape[0] if self.fixed_supports else None

    def supports(self):
        sup = [Tensor._wrap(P) for P in self.fixed_supports]
        if self.embeddings is not None:
            sup.append(G.self_adaptive_adjacency(self.embeddings))
        return sup

    def forward(self, X: np.ndarray) -> Tensor:
        """X (B, N, 2, T_x) -> (B, N, T_y)."""
        if X.ndim != 4 or X.shape[2] != 2 or X.shape[3] != self.input_len:
            raise ShapeError(f"graph_forecast: expected (B, N, 2, {self.input_len}) input, got {X.shape}")
        if self.fixed_supports and X.shape[1] != self.fixed_supports[0].shape[0]:
            raise ShapeError(f"graph_forecast: {X.shape[1]} nodes but supports are for {self.fixed_supports[0].shape[0]}")
        sup = self.supports()
        x = self.start(Tensor._wrap(np.asarray(X, dtype=np.float32)))
        skip = None
        for tcn, gcn, sk in zip(self.tcn, self.gcn, self.skip):
            h = gcn(tcn(x), sup)
            x = x + h
            s = sk(h[:, :, :, -1])
            skip = s if skip is None else skip + s
        return self.end2(T.relu(self.end1(T.relu(skip))))

    def train_forward(self, X, Y, rng):
        return self.forward(X)

    def predict(self, X: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(X).data

    def buffers(self) -> dict:
        return {f"support.{i}": P for i, P in enumerate(self.fixed_supports)}


def graph_forecast(X, model: GraphForecaster) -> np.ndarray:
    """Single window (N, 2, T_x) -> (N, T_y)."""
    return model.predict(np.asarray(X)[None])[0]


def build_base_model(kind: str, config, rng: Rng, supports=None):
    if kind == "seq2seq":
        return Seq2seq(config, rng)
    if kind == "graph":
        return GraphForecaster(config, supports or [], rng)
    raise ContractError(f"unknown base model kind {kind!r}")


def base_checkpoint(model) -> dict:
    state = {f"param.{k}": v for k, v in model.state_dict().items()}
    state.update({f"buffer.{k}": v for k, v in model.buffers().items()})
    return state


def load_base_checkpoint(kind: str, config, state: dict):
    params = {k[len("param."):]: v for k, v in state.items() if k.startswith("param.")}
    supports = [state[f"buffer.support.{i}"] for i in range(sum(k.startswith("buffer.support.") for k in state))]
    model = build_base_model(kind, config, Rng(0), supports)
    model.load_state_dict(params)
    return model


# ---------------------------------------------------------------- training


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    m = mask.astype(np.float32)
    diff = pred - Tensor._wrap(np.where(mask, target, 0).astype(np.float32))
    return T.sum(diff * diff * m) * (1.0 / max(float(m.sum()), 1.0))


def predict_batched(model, X: np.ndarray, batch: int = 512) -> np.ndarray:
    out = [model.predict(X[i:i + batch]) for i in range(0, len(X), batch)]
    return np.concatenate(out, axis=0) if out else np.zeros((0,) + X.shape[1:2] + (model.output_len,), np.float32)


def _mse(pred, Y, M):
    return float(np.sum(np.where(M, pred - Y, 0.0) ** 2, dtype=np.float64) / max(M.sum(), 1))


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0


def train_base(dataset: SeriesDataset, kind: str, config, seed: int = 0, supports=None):
    """Fit a base forecaster on normalised ``dataset`` and log every prediction.

    Returns (model, ForecastLog, TrainHistory). The returned model carries
    the weights of the epoch with the lowest validation MSE.
    """
    rng = Rng(seed)
    model = build_base_model(kind, config, rng.child(0), supports)
    Tx, Ty = config.input_len, config.output_len
    train = make_windows(dataset, "train", Tx, Ty)
    val = make_windows(dataset, "val", Tx, Ty)
    if len(train) == 0 or len(val) == 0:
        raise ContractError("train_base: empty training or validation split")
    params = model.parameters()
    state = AdamState(lr=config.lr)
    history = TrainHistory()
    order_rng = rng.child(1)
    tf_rng = rng.child(2)
    best, best_state = math.inf, None
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(train))
        total, count = 0.0, 0
        for i in range(0, len(perm), config.batch):
            idx = np.sort(perm[i:i + config.batch])
            pred = model.train_forward(train.X[idx], train.Y[idx], tf_rng)
            loss = masked_mse(pred, train.Y[idx], train.Y_mask[idx])
            backward(loss)
            adam_step(params, state)
            total += loss.item() * len(idx)
            count += len(idx)
        val_loss = _mse(predict_batched(model, val.X), val.Y, val.Y_mask)
        history.train_loss.append(total / count)
        history.val_loss.append(val_loss)
        if val_loss < best:
            best, best_state, history.best_epoch = val_loss, model.state_dict(), epoch
        log.info("base epoch %d train %.5f val %.5f", epoch, total / count, val_loss)
    model.load_state_dict(best_state)
    history.seconds = time.perf_counter() - t0
    return model, forecast_log(model, dataset), history


# --------------------------------------------------------------- forecast log


@dataclass
class ForecastLog:
    """Normalised predictions for every step t of every split.

    ``t`` is the global index of the last input step; ``y_pred`` and
    ``y_true`` are (n, N, T_y). ``y_true`` is NaN where the target lies past
    the end of the split, ``observed`` False where it is missing.
    """

    t: np.ndarray
    y_pred: np.ndarray
    y_true: np.ndarray
    observed: np.ndarray
    bounds: tuple

    @property
    def horizon(self) -> int:
        return self.y_pred.shape[2]

    def split_of(self, t):
        a, b = self.bounds
        return np.where(np.asarray(t) < a, 0, np.where(np.asarray(t) < b, 1, 2))

    def for_split(self, split: str) -> "ForecastLog":
        sel = self.split_of(self.t) == SPLITS.index(split)
        return ForecastLog(self.t[sel], self.y_pred[sel], self.y_true[sel], self.observed[sel], self.bounds)

    def predictions_by_time(self, lo: int, hi: int, n_nodes: int):
        """Dense (hi - lo, N, T_y) prediction array plus availability flags."""
        P = np.zeros((hi - lo, n_nodes, self.horizon), dtype=np.float32)
        have = np.zeros(hi - lo, dtype=bool)
        sel = (self.t >= lo) & (self.t < hi)
        P[self.t[sel] - lo] = self.y_pred[sel]
        have[self.t[sel] - lo] = True
        return P, have

    def write_csv(self, path) -> None:
        n, N, H = self.y_pred.shape
        with open(path, "w") as fh:
            fh.write("t,node,horizon,y_true,y_pred\n")
            for i in range(n):
                ti = int(self.t[i])
                for node in range(N):
                    for h in range(H):
                        yt = self.y_true[i, node, h]
                        yt_s = "" if (np.isnan(yt) or not self.observed[i, node, h]) else repr(float(yt))
                        fh.write(f"{ti},{node},{h + 1},{yt_s},{float(self.y_pred[i, node, h])!r}\n")

    @classmethod
    def read_csv(cls, path, bounds) -> "ForecastLog":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["t", "node", "horizon", "y_true", "y_pred"]:
                raise ParseError(f"unexpected header {header}", path, 1)
            for lineno, row in enumerate(reader, 2):
                if len(row) != 5:
                    raise ParseError(f"expected 5 fields, got {len(row)}", path, lineno)
                try:
                    rows.append((int(row[0]), int(row[1]), int(row[2]),
                                 float(row[3]) if row[3] else np.nan, float(row[4])))
                except ValueError as e:
                    raise ParseError(str(e), path, lineno) from None
        arr = np.array(rows, dtype=np.float64)
        ts = np.unique(arr[:, 0].astype(np.int64))
        N = int(arr[:, 1].max()) + 1
        H = int(arr[:, 2].max())
        if len(arr) != len(ts) * N * H:
            raise ParseError(f"log has {len(arr)} rows, expected {len(ts) * N * H}", path)
        ti = np.searchsorted(ts, arr[:, 0].astype(np.int64))
        ni = arr[:, 1].astype(int)
        hi = arr[:, 2].astype(int) - 1
        y_pred = np.zeros((len(ts), N, H), dtype=np.float32)
        y_true = np.full((len(ts), N, H), np.nan, dtype=np.float32)
        y_pred[ti, ni, hi] = arr[:, 4]
        y_true[ti, ni, hi] = arr[:, 3]
        return cls(ts, y_pred, y_true, ~np.isnan(y_true), tuple(bounds))


def input_windows(signal: np.ndarray, lo: int, hi: int, T_x: int):
    """Windows (n, N, 2, T_x) ending at every t in [lo + T_x - 1, hi) of one split."""
    ends = np.arange(lo + T_x - 1, hi)
    idx = ends[:, None] + np.arange(-T_x + 1, 1)[None, :]
    return ends, np.ascontiguousarray(signal[idx].transpose(0, 2, 3, 1))


def forecast_log(model, dataset: SeriesDataset) -> ForecastLog:
    sig = dataset.signal()
    Tx, Ty = model.input_len, model.output_len
    ts, preds, trues, obs = [], [], [], []
    for split in SPLITS:
        lo, hi = dataset.split_range(split)
        ends, X = input_windows(sig, lo, hi, Tx)
        P = predict_batched(model, X)
        tgt = ends[:, None] + np.arange(1, Ty + 1)[None, :]
        inside = tgt < hi
        tgt_c = np.minimum(tgt, hi - 1)
        Y = np.where(inside[:, None, :], dataset.values[tgt_c].transpose(0, 2, 1), np.nan)
        O = inside[:, None, :] & dataset.observed[tgt_c].transpose(0, 2, 1)
        ts.append(ends)
        preds.append(P)
        trues.append(Y.astype(np.float32))
        obs.append(O)
    return ForecastLog(np.concatenate(ts), np.concatenate(preds), np.concatenate(trues),
                       np.concatenate(obs), dataset.bounds)


def config_dict(config) -> dict:
    return asdict(config)
