"""Residual structure and calibration quality diagnostics.

All functions are pure and operate on arrays or immutable logs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError

MAPE_FLOOR = 1e-6
MASK_POLICY = "observed-targets; warm-up excluded; mape excludes |y_true| < 1e-6"


def acf(series, max_lag: int) -> np.ndarray:
    """r_1..r_max_lag with the shared full-series mean and full-series denominator."""
    y = np.asarray(series, dtype=np.float64).ravel()
    if max_lag < 1:
        raise ContractError("acf: max_lag must be >= 1")
    if len(y) <= max_lag:
        raise ContractError(f"acf: series of length {len(y)} is too short for lag {max_lag}")
    d = y - y.mean()
    den = float(np.dot(d, d))
    if den == 0.0:
        raise DegenerateInputError("acf: constant series has no autocorrelation")
    return np.array([np.dot(d[k:], d[:-k]) / den for k in range(1, max_lag + 1)])


def mean_abs_acf(series_list, max_lag: int = 12) -> float:
    """Mean over series and lags 1..max_lag of |r_k|; constant series are skipped."""
    vals = []
    for s in series_list:
        try:
            vals.append(np.abs(acf(s, max_lag)))
        except DegenerateInputError:
            continue
    if not vals:
        raise DegenerateInputError("mean_abs_acf: every series is constant")
    return float(np.mean(vals))


def lag1_cross_corr(residuals, nodes=None) -> np.ndarray:
    """M x M matrix; entry (i, j) correlates node i at t with node j at t - 1.

    ``residuals`` is (T, N). Entries involving a zero-variance node are NaN.
    """
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim != 2:
        raise ContractError(f"lag1_cross_corr: expected (T, N) residuals, got {r.shape}")
    if nodes is not None:
        r = r[:, list(nodes)]
    if r.shape[0] < 3:
        raise ContractError("lag1_cross_corr: need at least 3 aligned time steps")
    a = r[1:] - r[1:].mean(axis=0)
    b = r[:-1] - r[:-1].mean(axis=0)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (a.T @ b) / np.outer(na, nb)
    out[(na == 0)[:, None] | (nb == 0)[None, :]] = np.nan
    return out


@dataclass
class MetricsReport:
    horizons: list  # 1-based
    mae: np.ndarray
    rmse: np.ndarray
    mape: np.ndarray  # percent
    counts: np.ndarray
    mape_counts: np.ndarray
    overall: dict = field(default_factory=dict)
    mask_policy: str = MASK_POLICY

    def at(self, horizon: int) -> dict:
        i = self.horizons.index(horizon)
        return {"mae": float(self.mae[i]), "rmse": float(self.rmse[i]), "mape": float(self.mape[i]),
                "count": int(self.counts[i])}

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# mask policy: {self.mask_policy}\n")
            fh.write("horizon,mae,rmse,mape,count\n")
            for i, h in enumerate(self.horizons):
                fh.write(f"{h},{self.mae[i]!r},{self.rmse[i]!r},{self.mape[i]!r},{int(self.counts[i])}\n")
            o = self.overall
            fh.write(f"all,{o['mae']!r},{o['rmse']!r},{o['mape']!r},{o['count']}\n")

    def table(self, horizons=None, title: str = "") -> str:
        hs = horizons or self.horizons
        lines = [title] if title else []
        lines.append(f"{'horizon':>8} {'MAE':>10} {'RMSE':>10} {'MAPE%':>10}")
        for h in hs:
            m = self.at(h)
            lines.append(f"{h:>8} {m['mae']:>10.4f} {m['rmse']:>10.4f} {m['mape']:>10.2f}")
        return "\n".join(lines)


def _errors(y_pred, y_true, mask=None):
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    if y_pred.shape != y_true.shape:
        raise ContractError(f"metrics: prediction {y_pred.shape} and truth {y_true.shape} differ")
    m = ~np.isnan(y_true)
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    return y_pred - np.where(m, y_true, 0), m


def metrics(y_pred, y_true, mask=None) -> MetricsReport:
    """Per-horizon and overall MAE / RMSE / MAPE; the last axis is the horizon.

    Targets that are NaN or excluded by ``mask`` are ignored.
    """
    e, m = _errors(y_pred, y_true, mask)
    if not m.any():
        raise ContractError("metrics: no targets left after masking")
    H = e.shape[-1]
    e = e.reshape(-1, H)
    m = m.reshape(-1, H)
    y = np.asarray(y_true, dtype=np.float64).reshape(-1, H)
    pm = m & (np.abs(np.nan_to_num(y)) >= MAPE_FLOOR)
    ae = np.where(m, np.abs(e), 0)
    cnt = m.sum(axis=0)
    pcnt = pm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ape = np.where(pm, np.abs(e) / np.where(pm, np.abs(y), 1), 0)
        mae = ae.sum(axis=0) / cnt
        rmse = np.sqrt((ae ** 2).sum(axis=0) / cnt)
        mape = 100 * ape.sum(axis=0) / pcnt
    overall = {"mae": float(ae.sum() / cnt.sum()), "rmse": float(np.sqrt((ae ** 2).sum() / cnt.sum())),
               "mape": float(100 * ape.sum() / pcnt.sum()) if pcnt.sum() else float("nan"),
               "count": int(cnt.sum())}
    return MetricsReport(list(range(1, H + 1)), mae, rmse, mape, cnt, pcnt, overall)


@dataclass
class EventMask:
    mask: np.ndarray
    q: float
    threshold: float

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())


def event_mask(base_abs_error, q: float = 0.8) -> EventMask:
    """Mark records whose base absolute error is at or above the nearest-rank q-quantile.

    NaN entries (unavailable targets) are never selected and do not enter the quantile.
    """
    if not 0.0 <= q < 1.0:
        raise ContractError(f"event_mask: q must lie in [0, 1), got {q}")
    e = np.asarray(base_abs_error, dtype=np.float64)
    valid = ~np.isnan(e)
    vals = np.sort(e[valid])
    if vals.size == 0:
        raise ContractError("event_mask: no valid errors")
    thr = float(vals[min(int(np.floor(q * vals.size)), vals.size - 1)])
    return EventMask(valid & (np.nan_to_num(e, nan=-np.inf) >= thr), q, thr)


def error_share(abs_error, mask) -> float:
    """Fraction of total absolute error falling inside ``mask``."""
    e = np.nan_to_num(np.asarray(abs_error, dtype=np.float64))
    total = e.sum()
    if total == 0:
        raise DegenerateInputError("error_share: total error is zero")
    return float(e[np.asarray(mask, dtype=bool)].sum() / total)


@dataclass
class PatternReport:
    patterns: list  # code tuples, least frequent first
    counts: np.ndarray
    frequency: np.ndarray
    mean_residual: np.ndarray  # (n_patterns, T_y)
    flagged: np.ndarray  # per (step, node) row
    flagged_patterns: int

    @property
    def flagged_fraction(self) -> float:
        return float(self.flagged.mean())

    def summary(self, top: int = 10) -> str:
        lines = [f"{len(self.patterns)} distinct patterns over {int(self.counts.sum())} rows; "
                 f"{self.flagged_patterns} least frequent patterns flag {100 * self.flagged_fraction:.2f}% of rows"]
        order = np.argsort(-self.counts, kind="stable")[:top]
        for k in order:
            lines.append(f"  pattern #{k}: freq {self.frequency[k]:.4f}, mean |residual| "
                         f"{float(np.abs(self.mean_residual[k]).mean()):.4f}")
        return "\n".join(lines)


def pattern_report(codes, residuals=None, share: float = 0.05) -> PatternReport:
    """Group rows by identical pattern codes and flag the rarest patterns covering ``share`` of rows.

    ``codes`` is (n, N, d_c) or (rows, d_c); ``residuals`` (matching rows, T_y) gives
    the mean residual profile of each pattern. Patterns are accumulated from the
    least frequent (ties by first occurrence) until at least ``share`` of rows is
    covered.
    """
    c = np.asarray(codes)
    d_c = c.shape[-1]
    rows = c.reshape(-1, d_c)
    if rows.shape[0] == 0:
        raise ContractError("pattern_report: no codes")
    uniq, first, inverse, counts = np.unique(rows, axis=0, return_index=True, return_inverse=True,
                                             return_counts=True)
    inverse = inverse.reshape(-1)
    order = np.lexsort((first, counts))
    n = rows.shape[0]
    flagged_ids, covered = [], 0
    for k in order:
        if covered >= share * n:
            break
        flagged_ids.append(k)
        covered += counts[k]
    flagged = np.isin(inverse, flagged_ids)
    if residuals is not None:
        r = np.asarray(residuals, dtype=np.float64).reshape(n, -1)
        prof = np.zeros((len(uniq), r.shape[1]))
        np.add.at(prof, inverse, np.nan_to_num(r))
        prof /= counts[:, None]
    else:
        prof = np.zeros((len(uniq), 0))
    # re-index so patterns are listed least frequent first
    patterns = [tuple(int(v) for v in uniq[k]) for k in order]
    return PatternReport(patterns, counts[order], counts[order] / n, prof[order],
                         flagged.reshape(c.shape[:-1]), len(flagged_ids))


def write_acf_csv(path, r) -> None:
    with open(path, "w") as fh:
        fh.write("lag,r\n")
        for k, v in enumerate(r, 1):
            fh.write(f"{k},{float(v)!r}\n")


def write_heatmap_csv(path, mat) -> None:
    with open(path, "w") as fh:
        fh.write("i,j,value\n")
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                v = mat[i, j]
                fh.write(f"{i},{j},{'' if np.isnan(v) else repr(float(v))}\n")


def residual_series(y_pred, y_true, horizon: int):
    """(n, N) residual matrix at a 1-based horizon; NaN targets are dropped row-wise."""
    r = np.asarray(y_true, dtype=np.float64)[:, :, horizon - 1] - np.asarray(y_pred, dtype=np.float64)[:, :, horizon - 1]
    return r[~np.isnan(r).any(axis=1)]


def acf_summary(y_pred, y_true, horizon: int = 1, max_lag: int = 12) -> dict:
    """Per-node ACF of residuals at ``horizon`` plus their mean |r_k| (aggregate is a reporting addition)."""
    r = residual_series(y_pred, y_true, horizon)
    per_node = []
    for n in range(r.shape[1]):
        try:
            per_node.append(acf(r[:, n], max_lag))
        except DegenerateInputError:
            per_node.append(np.full(max_lag, np.nan))
    per_node = np.array(per_node)
    return {"per_node": per_node, "mean_abs": float(np.nanmean(np.abs(per_node)))}
