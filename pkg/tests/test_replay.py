import numpy as np
import pytest
from dataclasses import replace

from rescal.autograd.rng import Rng
from rescal.data import Scaler, gen_synthetic, gen_synthetic_spatial
from rescal.diagnostics import metrics
from rescal.errors import ContractError, ShapeError
from rescal.estimator import ResCAL, RescalConfig
from rescal.replay import (
    ResidualBuffer,
    exact_split,
    read_calibration_csv,
    residual_columns,
    run_stream,
    warmup_steps,
    windows_from_columns,
)


def naive_column(preds: dict, obs: dict, t: int, H: int, N: int):
    """U^t from dictionaries keyed by time; entry i-1 is x_t - Yhat^{t-i}_i."""
    col = np.zeros((N, H), dtype=np.float32)
    ok = np.zeros((N, H), dtype=bool)
    for i in range(1, H + 1):
        if t - i in preds and t in obs:
            col[:, i - 1] = np.float32(obs[t]) - preds[t - i][:, i - 1]
            ok[:, i - 1] = True
    return col, ok


class Persistence:
    n_nodes = None

    def __init__(self, T_x, T_y):
        self.input_len, self.output_len = T_x, T_y

    def predict(self, X):
        return np.repeat(X[:, :, 0, -1:], self.output_len, axis=-1)


def tiny_rescal(window, n_nodes=1, seed=0, zero=False):
    cfg = RescalConfig(window=window, layers=2, hidden=8, dilations=(1, 2), d_c=4, n_c=5, d_e=3, embed_dim=3)
    m = ResCAL(cfg, n_nodes, None, Rng(seed))
    if zero:
        for p in m.parameters():
            p.data[:] = 0
    return m


# ------------------------------------------------------------------ buffer


def test_two_horizon_hand_trace():
    a, b = np.array([[1.0, 2.0]]), np.array([[4.0, 8.0]])
    y2, y3 = 10.0, 20.0
    buf = ResidualBuffer(1, 2, 3)
    buf.push(1, a, [0.0])
    buf.push(2, b, [y2])
    buf.push(3, None, [y3])
    U, M = buf.assemble_U(3)
    np.testing.assert_array_equal(U[0, :, -1], [y3 - b[0, 0], y3 - a[0, 1]])
    assert M[0, :, -1].all()
    # at t=2 only R^1_{:,1} = y2 - a1 is observable
    np.testing.assert_array_equal(U[0, :, -2], [y2 - a[0, 0], 0.0])
    np.testing.assert_array_equal(M[0, :, -2], [True, False])
    # independent naive trace agrees
    col, ok = naive_column({1: a, 2: b}, {1: 0.0, 2: y2, 3: y3}, 3, 2, 1)
    np.testing.assert_array_equal(col, U[:, :, -1])
    np.testing.assert_array_equal(ok, M[:, :, -1])


def test_warmup_completion_and_cold_start():
    H = 4
    buf = ResidualBuffer(2, H, 4)
    r = np.random.default_rng(0)
    for t in range(1, H + 2):
        buf.push(t, r.normal(size=(2, H)), r.normal(size=2))
        U, M = buf.assemble_U()
        if t <= H:
            # cold start: entries whose prediction predates the first push are zero and masked
            assert not M[:, t - 1:, -1].any() and not U[:, t - 1:, -1].any()
    assert M[:, :, -1].all()
    assert U.shape == (2, H, 4)


def test_push_rejects_non_monotonic_time():
    buf = ResidualBuffer(1, 2, 2)
    buf.push(0, None, [1.0])
    with pytest.raises(ContractError):
        buf.push(2, None, [1.0])
    with pytest.raises(ContractError):
        buf.push(0, None, [1.0])
    with pytest.raises(ShapeError):
        buf.push(1, np.zeros((2, 2)), [1.0])


def test_perfect_forecaster_gives_zero_residuals():
    r = np.random.default_rng(1)
    L, N, H = 60, 3, 5
    x = r.normal(size=(L + H, N)).astype(np.float32)
    buf = ResidualBuffer(N, H, 6)
    for t in range(L):
        perfect = x[t + 1:t + 1 + H].T  # (N, H)
        buf.push(t, perfect, x[t])
        U, _ = buf.assemble_U(t)
        assert not U.any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_online_matches_offline_over_500_steps(seed):
    r = np.random.default_rng(seed)
    L, N, H, Tw = 500, 2, 6, 6
    P = r.normal(size=(L, N, H)).astype(np.float32)
    have = np.arange(L) >= Tw - 1
    x = r.normal(size=(L, N)).astype(np.float32)
    obs = r.uniform(size=(L, N)) > 0.1
    cols, mask = residual_columns(P, have, x, obs)
    Uoff, Moff = windows_from_columns(cols, mask, Tw)
    buf = ResidualBuffer(N, H, Tw)
    preds, seen = {}, {}
    for t in range(L):
        buf.push(t, P[t] if have[t] else None, x[t], obs[t])
        U, M = buf.assemble_U(t)
        np.testing.assert_array_equal(U, Uoff[t])
        np.testing.assert_array_equal(M, Moff[t])
        if have[t]:
            preds[t] = P[t]
        col, ok = naive_column(preds, {t: x[t]}, t, H, N)
        ok &= obs[t][:, None]
        np.testing.assert_array_equal(np.where(ok, col, 0), U[:, :, -1])


def test_buffer_never_exposes_future_targets():
    buf = ResidualBuffer(1, 3, 3)
    buf.push(0, np.ones((1, 3)), [0.0])
    U, M = buf.assemble_U(0)
    assert not M.any()
    with pytest.raises(ContractError):
        buf.assemble_U(1)


# ------------------------------------------------------------------ exact split


def test_exact_split_is_bitwise_consistent():
    r = np.random.default_rng(2)
    y_pred = r.normal(size=1000) * 60
    y_cal = y_pred + r.normal(size=1000) * 1e-3
    rr, yc = exact_split(y_pred, y_cal)
    assert np.array_equal(yc - y_pred, rr) and np.array_equal(y_pred + rr, yc)
    assert np.allclose(yc, y_cal, rtol=0, atol=1e-9)


# ------------------------------------------------------------------ stream


@pytest.fixture(scope="module")
def stream_data():
    raw = gen_synthetic(length=1000, seed=4)
    return raw, Scaler.fit(raw)


def test_record_count_and_warmup(stream_data):
    raw, sc = stream_data
    base = Persistence(6, 6)
    clog = run_stream(raw, sc, "test", base, tiny_rescal(6), Rng(0))
    lo, hi = raw.split_range("test")
    W = warmup_steps(6, 6)
    assert clog.warmup == W == 12
    assert len(clog) == (hi - lo - W) * 1 * 6
    np.testing.assert_array_equal(clog.t, np.arange(lo + W, hi))


def test_zero_rescal_reproduces_base_metrics(stream_data):
    raw, sc = stream_data
    base = Persistence(6, 6)
    plain = run_stream(raw, sc, "test", base, None)
    zero = run_stream(raw, sc, "test", base, tiny_rescal(6, zero=True), Rng(0))
    assert not zero.r_hat.any()
    np.testing.assert_array_equal(zero.y_calibrated, plain.y_calibrated)
    a = metrics(zero.y_calibrated, zero.y_true)
    b = metrics(plain.y_pred, plain.y_true)
    assert a.overall == b.overall
    np.testing.assert_array_equal(a.mae, b.mae)


def test_records_are_bitwise_additive(stream_data):
    raw, sc = stream_data
    clog = run_stream(raw, sc, "val", Persistence(6, 6), tiny_rescal(6, seed=3), Rng(1))
    assert np.array_equal(clog.y_calibrated - clog.y_pred, clog.r_hat)
    assert np.array_equal(clog.y_pred + clog.r_hat, clog.y_calibrated)
    assert clog.r_hat.any()


def test_stream_is_causal(stream_data):
    raw, sc = stream_data
    lo, hi = raw.split_range("test")
    t_cut = lo + 100
    noisy = raw.values.copy()
    noisy[t_cut + 1:] = np.random.default_rng(5).normal(size=noisy[t_cut + 1:].shape).astype(np.float32)
    base, m = Persistence(6, 6), tiny_rescal(6, seed=1)
    a = run_stream(raw, sc, "test", base, m, Rng(2))
    b = run_stream(replace(raw, values=noisy), sc, "test", base, m, Rng(2))
    sel = a.t <= t_cut
    for field in ("y_pred", "r_hat", "y_calibrated"):
        assert getattr(a, field)[sel].tobytes() == getattr(b, field)[sel].tobytes()
    assert a.y_pred[~sel].tobytes() != b.y_pred[~sel].tobytes()


def test_stream_dimension_checks(stream_data):
    raw, sc = stream_data
    with pytest.raises(ContractError):
        run_stream(raw, sc, "test", Persistence(6, 6), tiny_rescal(4), Rng(0))
    spatial, _ = gen_synthetic_spatial(3, length=1000, seed=0)
    graph_like = Persistence(6, 6)
    graph_like.n_nodes = 2
    with pytest.raises(ContractError):
        run_stream(spatial, Scaler.fit(spatial), "test", graph_like)


def test_latency_report_and_csv_round_trip(stream_data, tmp_path):
    raw, sc = stream_data
    clog = run_stream(raw, sc, "test", Persistence(6, 6), tiny_rescal(6), Rng(0))
    rep = clog.latency_report()
    assert rep["steps"] == len(clog.t) and rep["mean_ms"] > 0 and rep["p95_ms"] <= rep["max_ms"]
    p = tmp_path / "cal.csv"
    clog.write_csv(p)
    assert p.read_text().splitlines()[0] == "t,node,horizon,y_pred,r_hat,y_calibrated,y_true"
    back = read_calibration_csv(p)
    np.testing.assert_array_equal(back.t, clog.t)
    for field in ("y_pred", "r_hat", "y_calibrated", "y_true"):
        np.testing.assert_array_equal(getattr(back, field), getattr(clog, field))
    codes = tmp_path / "codes.csv"
    clog.write_codes_csv(codes)
    assert codes.read_text().splitlines()[0] == "t,node,code_0,code_1,code_2,code_3"
