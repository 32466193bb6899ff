"""Streaming replay under the residual-availability schedule.

At time t the residual of the prediction made at t - i for horizon i,
R^{t-i}_{:,i} = x_t - Yhat^{t-i}_{:,i}, has just become observable. The column
U^t stacks these for i = 1..T_y; ResCAL reads the last T such columns.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SeriesDataset, Scaler
from .errors import ContractError, ShapeError


def warmup_steps(input_len: int, output_len: int) -> int:
    """Local steps excluded before the first emitted record (T_x + T_y)."""
    return input_len + output_len


class ResidualBuffer:
    """Ring buffers of recent predictions and newly observed residual columns."""

    def __init__(self, n_nodes: int, horizon: int, window: int):
        if min(n_nodes, horizon, window) < 1:
            raise ContractError("ResidualBuffer: sizes must be positive")
        self.n_nodes, self.horizon, self.window = n_nodes, horizon, window
        self._pred = np.zeros((horizon, n_nodes, horizon), dtype=np.float32)
        self._pred_t = np.full(horizon, -1, dtype=np.int64)
        self._cols = np.zeros((window, n_nodes, horizon), dtype=np.float32)
        self._mask = np.zeros((window, n_nodes, horizon), dtype=bool)
        self._col_t = np.full(window, -1, dtype=np.int64)
        self.t = None

    def push(self, t: int, prediction, observation, observed=None) -> None:
        """Record x_t (and Yhat^t when not None); residuals targeting t become observable."""
        if self.t is not None and t != self.t + 1:
            raise ContractError(f"ResidualBuffer.push: expected t={self.t + 1}, got t={t}")
        if t < 0:
            raise ContractError("ResidualBuffer.push: t must be non-negative")
        N, H = self.n_nodes, self.horizon
        x = np.asarray(observation, dtype=np.float32).reshape(-1)
        if x.shape != (N,):
            raise ShapeError(f"ResidualBuffer.push: observation shape {x.shape}, expected ({N},)")
        ok = np.ones(N, dtype=bool) if observed is None else np.asarray(observed, dtype=bool).reshape(N)
        i = np.arange(1, H + 1)
        src = t - i
        slots = src % H
        valid = (src >= 0) & (self._pred_t[slots] == src)
        past = self._pred[slots, :, i - 1].T  # (N, H): Yhat^{t-i}_{:, i}
        mask = valid[None, :] & ok[:, None]
        slot = t % self.window
        self._cols[slot] = np.where(mask, x[:, None] - past, 0)
        self._mask[slot] = mask
        self._col_t[slot] = t
        if prediction is not None:
            p = np.asarray(prediction, dtype=np.float32)
            if p.shape != (N, H):
                raise ShapeError(f"ResidualBuffer.push: prediction shape {p.shape}, expected ({N}, {H})")
            self._pred[t % H] = p
            self._pred_t[t % H] = t
        self.t = t

    def assemble_U(self, t: int | None = None):
        """(U, mask) of shape (N, T_u, T); column -1 is U^t, zero-filled where unavailable."""
        t = self.t if t is None else t
        if t is None or t != self.t:
            raise ContractError(f"assemble_U: buffer is at t={self.t}, requested t={t}")
        times = np.arange(t - self.window + 1, t + 1)
        slots = times % self.window
        present = (times >= 0) & (self._col_t[slots] == times)
        U = np.where(present[:, None, None], self._cols[slots], 0).transpose(1, 2, 0)
        M = (present[:, None, None] & self._mask[slots]).transpose(1, 2, 0)
        return np.ascontiguousarray(U), np.ascontiguousarray(M)


def residual_columns(P, have, x, observed=None):
    """Offline U^s for every local step s from dense predictions P (L, N, H).

    ``have[s]`` flags whether a prediction was made at s; x (L, N) holds the
    observations. Returns (cols, mask) of shape (L, N, H).
    """
    P = np.asarray(P, dtype=np.float32)
    x = np.asarray(x, dtype=np.float32)
    L, N, H = P.shape
    obs = np.ones((L, N), dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    cols = np.zeros((L, N, H), dtype=np.float32)
    mask = np.zeros((L, N, H), dtype=bool)
    for i in range(1, H + 1):
        if i >= L:
            break
        m = have[:-i, None] & obs[i:]
        cols[i:, :, i - 1] = np.where(m, x[i:] - P[:-i, :, i - 1], 0)
        mask[i:, :, i - 1] = m
    return cols, mask


def windows_from_columns(cols, mask, window: int):
    """Stack trailing windows: out[s] = cols[s-window+1..s] as (N, H, window)."""
    L, N, H = cols.shape
    pad = np.zeros((window - 1, N, H), dtype=cols.dtype)
    c = np.concatenate([pad, cols])
    m = np.concatenate([pad.astype(bool), mask])
    idx = np.arange(L)[:, None] + np.arange(window)[None, :]
    return (np.ascontiguousarray(c[idx].transpose(0, 2, 3, 1)),
            np.ascontiguousarray(m[idx].transpose(0, 2, 3, 1)))


def offline_residual_windows(flog, dataset: SeriesDataset, split: str, window: int):
    """U windows (L, N, T_u, T) for every local step of ``split`` from a complete log."""
    lo, hi = dataset.split_range(split)
    P, have = flog.predictions_by_time(lo, hi, dataset.n_nodes)
    cols, mask = residual_columns(P, have, dataset.values[lo:hi], dataset.observed[lo:hi])
    return windows_from_columns(cols, mask, window)


# ------------------------------------------------------------------ stream


def exact_split(y_pred: np.ndarray, y_cal: np.ndarray):
    """Adjust (r, y_cal) so that y_pred + r == y_cal and y_cal - y_pred == r bitwise."""
    r = y_cal - y_pred
    for _ in range(8):
        y_cal = y_pred + r
        r_new = y_cal - y_pred
        if np.array_equal(r_new, r):
            return r, y_cal
        r = r_new
    raise ArithmeticError("exact_split: no bitwise-consistent decomposition found")


@dataclass
class CalibrationLog:
    """Calibration records in original units, arrays of shape (n, N, T_y)."""

    t: np.ndarray
    y_pred: np.ndarray
    r_hat: np.ndarray
    y_calibrated: np.ndarray
    y_true: np.ndarray
    codes: np.ndarray | None = None  # (n, N, d_c) when the quantization branch ran
    latency: np.ndarray = field(default_factory=lambda: np.zeros(0))  # seconds per calibration step
    warmup: int = 0

    def __len__(self):
        return self.y_pred.size

    @property
    def horizon(self) -> int:
        return self.y_pred.shape[2]

    def write_csv(self, path) -> None:
        n, N, H = self.y_pred.shape
        with open(path, "w") as fh:
            fh.write("t,node,horizon,y_pred,r_hat,y_calibrated,y_true\n")
            for i in range(n):
                ti = int(self.t[i])
                for node in range(N):
                    for h in range(H):
                        yt = self.y_true[i, node, h]
                        yt_s = "" if np.isnan(yt) else repr(float(yt))
                        fh.write(f"{ti},{node},{h + 1},{float(self.y_pred[i, node, h])!r},"
                                 f"{float(self.r_hat[i, node, h])!r},{float(self.y_calibrated[i, node, h])!r},{yt_s}\n")

    def write_codes_csv(self, path) -> None:
        if self.codes is None:
            raise ContractError("no pattern codes recorded (quantization branch disabled)")
        n, N, d_c = self.codes.shape
        with open(path, "w") as fh:
            fh.write("t,node," + ",".join(f"code_{k}" for k in range(d_c)) + "\n")
            for i in range(n):
                for node in range(N):
                    fh.write(f"{int(self.t[i])},{node}," + ",".join(str(int(c)) for c in self.codes[i, node]) + "\n")

    def latency_report(self) -> dict:
        if len(self.latency) == 0:
            return {"steps": 0}
        ms = self.latency * 1e3
        return {"steps": int(len(ms)), "mean_ms": float(ms.mean()), "p50_ms": float(np.percentile(ms, 50)),
                "p95_ms": float(np.percentile(ms, 95)), "max_ms": float(ms.max())}


def read_calibration_csv(path):
    """Parse a calibration CSV back into a CalibrationLog."""
    import csv

    from .errors import ParseError

    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "node", "horizon", "y_pred", "r_hat", "y_calibrated", "y_true"]:
            raise ParseError(f"unexpected header {header}", path, 1)
        for lineno, row in enumerate(reader, 2):
            if len(row) != 7:
                raise ParseError(f"expected 7 fields, got {len(row)}", path, lineno)
            try:
                rows.append((int(row[0]), int(row[1]), int(row[2]), float(row[3]), float(row[4]),
                             float(row[5]), float(row[6]) if row[6] else np.nan))
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
    if not rows:
        raise ParseError("no records", path, 2)
    a = np.array(rows, dtype=np.float64)
    ts = np.unique(a[:, 0].astype(np.int64))
    N, H = int(a[:, 1].max()) + 1, int(a[:, 2].max())
    out = np.full((4, len(ts), N, H), np.nan)
    ti = np.searchsorted(ts, a[:, 0].astype(np.int64))
    out[:, ti, a[:, 1].astype(int), a[:, 2].astype(int) - 1] = a[:, 3:].T
    return CalibrationLog(ts, out[0], out[1], out[2], out[3])


def run_stream(dataset: SeriesDataset, scaler: Scaler, split: str, base, rescal=None, rng=None,
               mode: str | None = None) -> CalibrationLog:
    """Replay ``split`` of the raw ``dataset`` step by step.

    Per step t: observe x_t and push it (making residuals that target t
    available), let the base model forecast Yhat^t from the last T_x steps,
    assemble U^t, estimate R^t (zero when ``rescal`` is None) and emit records
    in original units. Steps before the T_x + T_y warm-up emit nothing.
    """
    from .autograd.rng import Rng

    if getattr(base, "n_nodes", None) not in (None, dataset.n_nodes):
        raise ContractError(f"run_stream: base model has {base.n_nodes} nodes, dataset {dataset.n_nodes}")
    Tx, Ty = base.input_len, base.output_len
    if rescal is not None:
        c = rescal.config
        if c.window != Tx or c.horizon != Ty:
            raise ContractError(f"run_stream: ResCAL window {c.window} does not match base T_x={Tx}, T_y={Ty}")
        if rescal.graph and rescal.n_nodes != dataset.n_nodes:
            raise ContractError(f"run_stream: ResCAL has {rescal.n_nodes} nodes, dataset {dataset.n_nodes}")
    rng = rng or Rng(0)
    lo, hi = dataset.split_range(split)
    L, N = hi - lo, dataset.n_nodes
    W = warmup_steps(Tx, Ty)
    sig = scaler.transform(dataset).signal()[lo:hi]
    raw = dataset.values[lo:hi].astype(np.float64)
    obs = dataset.observed[lo:hi]
    buf = ResidualBuffer(N, Ty, Tx)
    n_out = max(L - W, 0)
    y_pred = np.zeros((n_out, N, Ty))
    r_hat = np.zeros((n_out, N, Ty))
    y_true = np.full((n_out, N, Ty), np.nan)
    codes = None
    latency = np.zeros(n_out)
    for tau in range(L):
        pred = None
        if tau >= Tx - 1:
            window = sig[tau - Tx + 1:tau + 1].transpose(1, 2, 0)  # (N, 2, T_x)
            pred = base.predict(window[None])[0]
        buf.push(tau, pred, sig[tau, :, 0], obs[tau])
        if tau < W:
            continue
        k = tau - W
        start = time.perf_counter()
        if rescal is None:
            r = np.zeros((N, Ty), dtype=np.float32)
        else:
            U, _ = buf.assemble_U(tau)
            r, cd = rescal.predict(window[None], U[None], rng, mode)
            r = r[0]
            if cd is not None:
                if codes is None:
                    codes = np.zeros((n_out, N, cd.shape[-1]), dtype=np.int16)
                codes[k] = cd[0]
        latency[k] = time.perf_counter() - start
        y_pred[k] = scaler.invert(pred)
        r_hat[k] = scaler.scale_only(r)
        for h in range(Ty):
            j = tau + h + 1
            if j < L:
                y_true[k, :, h] = np.where(obs[j], raw[j], np.nan)
    y_cal = y_pred + r_hat
    r_hat, y_cal = exact_split(y_pred, y_cal)
    return CalibrationLog(np.arange(lo + W, hi), y_pred, r_hat, y_cal, y_true, codes, latency, W)
