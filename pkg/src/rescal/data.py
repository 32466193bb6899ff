"""Datasets: synthetic generators, speed CSV ingestion, scaling and windowing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta

import numpy as np

from .autograd.rng import Rng
from .errors import ContractError, ParseError

SPLITS = ("train", "val", "test")
DEFAULT_DAY_LENGTH = 288
SYNTHETIC_START = datetime(2000, 1, 1)


@dataclass(frozen=True, eq=False)
class SeriesDataset:
    """A T_total x N speed matrix with a time-of-day feature and 7:1:2 splits.

    ``observed`` is False where a value is a missing-data sentinel; ``events``
    optionally flags steps that belong to a generated zero event.
    """

    values: np.ndarray
    timestamps: np.ndarray
    observed: np.ndarray
    bounds: tuple
    node_ids: tuple = ()
    day_length: int = DEFAULT_DAY_LENGTH
    events: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ContractError(f"values must be T x N, got shape {self.values.shape}")
        T = self.values.shape[0]
        if self.timestamps.shape != (T,):
            raise ContractError("timestamps must have one entry per step")
        a, b = self.bounds
        if not 0 < a < b < T:
            raise ContractError(f"split bounds {self.bounds} do not partition [0, {T})")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    def split_range(self, split: str) -> tuple:
        a, b = self.bounds
        return {"train": (0, a), "val": (a, b), "test": (b, self.length)}[split]

    def split_arrays(self, split: str):
        lo, hi = self.split_range(split)
        return self.values[lo:hi], self.timestamps[lo:hi], self.observed[lo:hi]

    def signal(self) -> np.ndarray:
        """Graph signal X of shape T x N x 2 (speed, time of day)."""
        tod = np.broadcast_to(self.timestamps[:, None], self.values.shape)
        return np.stack([self.values, tod], axis=-1).astype(np.float32)


def split_bounds(length: int, ratios=(0.7, 0.1, 0.2)) -> tuple:
    if not math.isclose(sum(ratios), 1.0) or min(ratios) <= 0:
        raise ContractError(f"split ratios must be positive and sum to 1, got {ratios}")
    a = int(round(length * ratios[0]))
    b = int(round(length * (ratios[0] + ratios[1])))
    return a, b


def time_of_day(steps: np.ndarray, day_length: int) -> np.ndarray:
    return ((steps % day_length) / day_length).astype(np.float32)


@dataclass(frozen=True)
class Scaler:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ContractError(f"scaler std must be positive, got {self.std}")

    @classmethod
    def fit(cls, dataset: SeriesDataset) -> "Scaler":
        """Z-score statistics over observed training-split values."""
        vals, _, obs = dataset.split_arrays("train")
        v = vals[obs].astype(np.float64)
        if v.size == 0:
            raise ContractError("training split has no observed values")
        std = float(v.std())
        return cls(float(v.mean()), std if std > 0 else 1.0)

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def scale_only(self, z):
        """Map a difference (e.g. a residual) back to original units."""
        return np.asarray(z, dtype=np.float64) * self.std

    def transform(self, dataset: SeriesDataset) -> SeriesDataset:
        return replace(dataset, values=self.apply(dataset.values).astype(np.float32))


# ------------------------------------------------------------------ synthetic


def _zero_periods(n_periods: int, p_zero: float, rng: Rng) -> np.ndarray:
    return rng.random(n_periods) < p_zero


def gen_synthetic(length: int = 10000, period: int = 50, p_zero: float = 0.1, seed: int = 0,
                  day_length: int = DEFAULT_DAY_LENGTH) -> SeriesDataset:
    """Sine wave sin(2 pi t / period) with whole periods zeroed at random.

    Each complete period is replaced by zeros independently with probability
    ``p_zero``; a trailing partial period is never zeroed.
    """
    _check_synthetic(length, period, p_zero)
    t = np.arange(length)
    n_periods = length // period
    zeroed = _zero_periods(n_periods, p_zero, Rng(seed))
    events = np.zeros(length, dtype=bool)
    events[:n_periods * period] = np.repeat(zeroed, period)
    values = np.where(events, 0.0, np.sin(2 * np.pi * t / period)).astype(np.float32)
    return SeriesDataset(
        values=values[:, None],
        timestamps=time_of_day(t, day_length),
        observed=np.ones((length, 1), dtype=bool),
        bounds=split_bounds(length),
        node_ids=("0",),
        day_length=day_length,
        events=events[:, None],
    )


def gen_synthetic_spatial(n_nodes: int = 3, length: int = 10000, period: int = 50, p_zero: float = 0.1,
                          propagation_lag: int = 5, seed: int = 0, day_length: int = DEFAULT_DAY_LENGTH):
    """Chain of nodes where zero events travel downstream with a fixed lag.

    Node 0 follows :func:`gen_synthetic`; node i carries node i-1's event mask
    shifted later by ``propagation_lag`` steps on the same sine carrier.
    Returns the dataset and an N x N distance matrix for the chain
    (1000 m between consecutive nodes, +inf elsewhere, zero diagonal).
    """
    if n_nodes < 2:
        raise ContractError(f"spatial generator needs n_nodes >= 2, got {n_nodes}")
    if propagation_lag < 0:
        raise ContractError("propagation_lag must be non-negative")
    base = gen_synthetic(length, period, p_zero, seed, day_length)
    t = np.arange(length)
    carrier = np.sin(2 * np.pi * t / period)
    events = np.zeros((length, n_nodes), dtype=bool)
    events[:, 0] = base.events[:, 0]
    for i in range(1, n_nodes):
        if propagation_lag:
            events[propagation_lag:, i] = events[:-propagation_lag, i - 1]
        else:
            events[:, i] = events[:, i - 1]
    values = np.where(events, 0.0, carrier[:, None]).astype(np.float32)
    ds = SeriesDataset(
        values=values,
        timestamps=base.timestamps,
        observed=np.ones((length, n_nodes), dtype=bool),
        bounds=base.bounds,
        node_ids=tuple(str(i) for i in range(n_nodes)),
        day_length=day_length,
        events=events,
    )
    dist = np.full((n_nodes, n_nodes), np.inf)
    np.fill_diagonal(dist, 0.0)
    for i in range(n_nodes - 1):
        dist[i, i + 1] = 1000.0
    return ds, dist


def _check_synthetic(length, period, p_zero):
    if period < 1 or length < 2 * period:
        raise ContractError(f"need period >= 1 and length >= 2 * period, got length={length} period={period}")
    if not 0.0 <= p_zero <= 1.0:
        raise ContractError(f"p_zero must lie in [0, 1], got {p_zero}")


# ------------------------------------------------------------------------ csv


def _fmt(x) -> str:
    return np.format_float_positional(np.float32(x), unique=True, trim="-")


def write_speed_csv(path, dataset: SeriesDataset, start: datetime = SYNTHETIC_START) -> None:
    """Write ``timestamp,<node ids...>`` rows at 24h / day_length spacing."""
    step = timedelta(days=1) / dataset.day_length
    ids = dataset.node_ids or tuple(str(i) for i in range(dataset.n_nodes))
    with open(path, "w", newline="") as fh:
        fh.write("timestamp," + ",".join(ids) + "\n")
        for i in range(dataset.length):
            ts = (start + i * step).isoformat(timespec="seconds")
            fh.write(ts + "," + ",".join(_fmt(v) for v in dataset.values[i]) + "\n")


def load_vocab(path) -> dict:
    """Node-id vocabulary file: one id per line, index = line order."""
    vocab = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            node = line.strip()
            if not node:
                continue
            if node in vocab:
                raise ParseError(f"duplicate node id {node!r}", path, lineno)
            vocab[node] = len(vocab)
    return vocab


def write_vocab(path, node_ids) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{n}\n" for n in node_ids)


def load_speed_csv(path, vocab: dict | None = None, zero_is_missing: bool = True,
                   day_length: int = DEFAULT_DAY_LENGTH, ratios=(0.7, 0.1, 0.2)) -> SeriesDataset:
    """Read ``iso_timestamp,v_1,...,v_N`` rows under a header of node ids.

    Columns are reordered to the vocabulary's indices when one is given.
    Zero speeds are flagged unobserved unless ``zero_is_missing`` is False.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path, 1) from None
        ids = [h.strip() for h in header[1:]]
        if not ids:
            raise ParseError("header lists no node columns", path, 1)
        if vocab is not None:
            for node in ids:
                if node not in vocab:
                    raise ParseError(f"unknown node id {node!r}", path, 1)
            if len(ids) != len(vocab):
                raise ParseError(f"header has {len(ids)} nodes, vocabulary has {len(vocab)}", path, 1)
            order = [vocab[n] for n in ids]
        else:
            order = list(range(len(ids)))
        rows, stamps = [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
            try:
                ts = datetime.fromisoformat(row[0].strip())
                vals = [float(v) for v in row[1:]]
            except ValueError as e:
                raise ParseError(str(e), path, lineno) from None
            if stamps and ts <= stamps[-1]:
                raise ParseError("timestamps must be strictly increasing", path, lineno)
            stamps.append(ts)
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows", path, 2)
    raw = np.asarray(rows, dtype=np.float32)
    values = np.empty_like(raw)
    values[:, order] = raw
    node_ids = [None] * len(ids)
    for col, node in zip(order, ids):
        node_ids[col] = node
    minutes = np.array([t.hour * 60 + t.minute + t.second / 60.0 for t in stamps])
    observed = values != 0 if zero_is_missing else np.ones(values.shape, dtype=bool)
    return SeriesDataset(
        values=values,
        timestamps=(minutes / 1440.0).astype(np.float32),
        observed=observed,
        bounds=split_bounds(len(rows), ratios),
        node_ids=tuple(node_ids),
        day_length=day_length,
    )


# ------------------------------------------------------------------ windowing


@dataclass
class WindowSet:
    """Samples X (S, N, 2, T_x), targets Y (S, N, T_y) and their mask.

    ``t`` holds the global index of the last input step of each sample.
    """

    t: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Y_mask: np.ndarray

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield self.t[i], self.X[i], self.Y[i]


def make_windows(dataset: SeriesDataset, split: str, T_x: int, T_y: int) -> WindowSet:
    """All windows X[t-T_x+1 .. t] -> Y[t+1 .. t+T_y] lying inside one split."""
    lo, hi = dataset.split_range(split)
    L = hi - lo
    if L < T_x + T_y:
        raise ContractError(f"split '{split}' has {L} steps, need at least T_x + T_y = {T_x + T_y}")
    sig = dataset.signal()[lo:hi]  # L x N x 2
    vals = dataset.values[lo:hi]
    obs = dataset.observed[lo:hi]
    S = L - T_x - T_y + 1
    ends = np.arange(T_x - 1, T_x - 1 + S)
    in_idx = ends[:, None] + np.arange(-T_x + 1, 1)[None, :]  # S x T_x
    out_idx = ends[:, None] + np.arange(1, T_y + 1)[None, :]  # S x T_y
    X = sig[in_idx].transpose(0, 2, 3, 1)  # S x N x 2 x T_x
    Y = vals[out_idx].transpose(0, 2, 1)
    M = obs[out_idx].transpose(0, 2, 1)
    return WindowSet(t=ends + lo, X=np.ascontiguousarray(X), Y=np.ascontiguousarray(Y), Y_mask=np.ascontiguousarray(M))


def window_at(signal: np.ndarray, t: int, T_x: int) -> np.ndarray:
    """Single input window (N, 2, T_x) ending at local index ``t``."""
    return np.ascontiguousarray(signal[t - T_x + 1:t + 1].transpose(1, 2, 0))
