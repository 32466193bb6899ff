import numpy as np
import pytest
from hypothesis import given, settings, assume
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rescal.diagnostics import (
    MASK_POLICY,
    acf,
    acf_summary,
    error_share,
    event_mask,
    lag1_cross_corr,
    mean_abs_acf,
    metrics,
    pattern_report,
    write_acf_csv,
    write_heatmap_csv,
)
from rescal.errors import ContractError, DegenerateInputError


def acf_reference(y, k):
    """Direct transcription of the textbook sample autocorrelation with loops."""
    n = len(y)
    m = sum(y) / n
    num = sum((y[t] - m) * (y[t - k] - m) for t in range(k, n))
    den = sum((v - m) ** 2 for v in y)
    return num / den


# ------------------------------------------------------------------ acf


def test_acf_hand_example():
    assert acf([1, 2, 3, 4], 1)[0] == pytest.approx(0.25)


def test_acf_matches_loop_reference():
    y = list(np.random.default_rng(0).normal(size=50))
    np.testing.assert_allclose(acf(y, 5), [acf_reference(y, k) for k in range(1, 6)], rtol=1e-12)


def test_acf_errors():
    with pytest.raises(DegenerateInputError):
        acf([3.0] * 10, 2)
    with pytest.raises(ContractError):
        acf([1.0, 2.0], 2)


def test_acf_white_noise():
    r = acf(np.random.default_rng(1).normal(size=10_000), 12)
    assert np.abs(r).max() < 0.05


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.integers(3, 60), elements=st.floats(-1e3, 1e3)))
def test_acf_is_bounded(y):
    assume(np.ptp(y) > 1e-6)
    assert np.all(np.abs(acf(y, len(y) - 1)) <= 1 + 1e-9)


def test_mean_abs_acf_skips_constant_series():
    noise = np.random.default_rng(2).normal(size=200)
    assert mean_abs_acf([noise, np.ones(200)], 3) == pytest.approx(np.abs(acf(noise, 3)).mean())
    with pytest.raises(DegenerateInputError):
        mean_abs_acf([np.ones(10)], 3)


# ------------------------------------------------------------------ cross correlation


def test_lag1_shifted_copy():
    # node 0 at t is node 1 at t - 1
    x = np.random.default_rng(4).normal(size=500)
    res = np.stack([np.r_[0.0, x[:-1]], x], axis=1)
    C = lag1_cross_corr(res)
    assert C.shape == (2, 2)
    assert C[0, 1] == pytest.approx(1.0)


def test_lag1_diagonal_is_autocorrelation():
    x = np.cumsum(np.random.default_rng(5).normal(size=300))
    C = lag1_cross_corr(np.stack([x, -x], axis=1))
    a = x[1:] - x[1:].mean()
    b = x[:-1] - x[:-1].mean()
    assert C[0, 0] == pytest.approx(a @ b / np.sqrt((a @ a) * (b @ b)))
    assert C[1, 1] == pytest.approx(C[0, 0])


def test_lag1_independent_noise():
    C = lag1_cross_corr(np.random.default_rng(6).normal(size=(10_000, 3)))
    assert np.abs(C).max() < 0.05


def test_lag1_zero_variance_is_missing():
    res = np.stack([np.random.default_rng(7).normal(size=20), np.full(20, 2.0)], axis=1)
    C = lag1_cross_corr(res)
    assert np.isnan(C[1]).all() and np.isnan(C[:, 1]).all() and not np.isnan(C[0, 0])
    with pytest.raises(ContractError):
        lag1_cross_corr(np.zeros((2, 2)))


def test_lag1_node_subset():
    res = np.random.default_rng(8).normal(size=(100, 4))
    np.testing.assert_allclose(lag1_cross_corr(res, [0, 2]), lag1_cross_corr(res)[np.ix_([0, 2], [0, 2])])


# ------------------------------------------------------------------ metrics


def test_metrics_hand_example():
    rep = metrics(np.array([[3.0], [4.0]]), np.array([[0.0], [0.0]]))
    assert rep.at(1)["mae"] == pytest.approx(3.5)
    assert rep.at(1)["rmse"] == pytest.approx(np.sqrt(12.5))
    assert rep.at(1)["rmse"] == pytest.approx(3.5355, abs=1e-4)
    assert rep.mape_counts[0] == 0  # zero targets are excluded from MAPE


def test_metrics_perfect_prediction():
    y = np.random.default_rng(9).uniform(1, 2, size=(10, 2, 3))
    rep = metrics(y, y)
    assert rep.overall["mae"] == rep.overall["rmse"] == rep.overall["mape"] == 0


def test_mape_mask_and_nan_targets():
    y_true = np.array([[2.0, 0.0, np.nan]]).T
    y_pred = np.array([[1.0, 5.0, 7.0]]).T
    rep = metrics(y_pred, y_true)
    assert rep.counts[0] == 2 and rep.mape_counts[0] == 1
    assert rep.at(1)["mape"] == pytest.approx(50.0)
    assert rep.at(1)["mae"] == pytest.approx(3.0)


def test_metrics_empty_after_mask():
    with pytest.raises(ContractError):
        metrics(np.ones((2, 1)), np.ones((2, 1)), mask=np.zeros((2, 1), dtype=bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_overall_mae_is_count_weighted_horizon_mean(seed):
    r = np.random.default_rng(seed)
    y_true = r.normal(size=(30, 2, 4))
    y_true[r.uniform(size=y_true.shape) < 0.2] = np.nan
    assume((~np.isnan(y_true)).reshape(-1, 4).any(axis=0).all())
    rep = metrics(r.normal(size=y_true.shape), y_true)
    w = rep.counts / rep.counts.sum()
    assert rep.overall["mae"] == pytest.approx(float((w * rep.mae).sum()))
    assert np.all(rep.rmse >= rep.mae - 1e-12) and np.all(rep.mae >= 0)


def test_metrics_csv_header(tmp_path):
    rep = metrics(np.ones((4, 1, 2)), np.full((4, 1, 2), 2.0))
    p = tmp_path / "m.csv"
    rep.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == f"# mask policy: {MASK_POLICY}" and lines[1] == "horizon,mae,rmse,mape,count"
    assert lines[-1].startswith("all,")


# ------------------------------------------------------------------ event mask


def test_event_mask_top_two_of_ten():
    em = event_mask(np.arange(1, 11, dtype=float), 0.8)
    np.testing.assert_array_equal(np.flatnonzero(em.mask), [8, 9])
    assert em.threshold == 9.0


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.integers(5, 300), elements=st.floats(0, 100), unique=True))
def test_event_mask_fraction(e):
    em = event_mask(e, 0.8)
    assert abs(em.fraction - 0.2) <= 1 / len(e) + 1e-12


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.int64, st.integers(5, 100), elements=st.integers(0, 400)))
def test_event_mask_monotone_invariance(k):
    # quarter-step grid keeps distinct errors distinct after the transform
    e = k / 4.0
    a = event_mask(e, 0.8).mask
    b = event_mask(np.exp(e / 10) * 3 + 1, 0.8).mask
    np.testing.assert_array_equal(a, b)


def test_event_mask_ignores_nan_and_validates_q():
    e = np.array([1.0, np.nan, 3.0, 2.0, 5.0])
    em = event_mask(e, 0.5)
    assert not em.mask[1] and em.mask[[2, 4]].all()
    with pytest.raises(ContractError):
        event_mask(e, 1.0)


def test_error_share():
    e = np.array([1.0, 1.0, 2.0, 6.0])
    assert error_share(e, e >= 2) == pytest.approx(0.8)
    with pytest.raises(DegenerateInputError):
        error_share(np.zeros(3), np.ones(3, bool))


# ------------------------------------------------------------------ pattern report


def test_identical_codes_single_cluster():
    rep = pattern_report(np.zeros((20, 2, 4), dtype=int))
    assert len(rep.patterns) == 1 and rep.frequency[0] == 1.0


def test_flagged_fraction_and_order():
    r = np.random.default_rng(10)
    codes = r.integers(0, 3, size=(400, 2))
    rep = pattern_report(codes, r.normal(size=(400, 3)), share=0.05)
    assert np.all(np.diff(rep.counts) >= 0)
    max_share = rep.frequency.max()
    assert 0.05 <= rep.flagged_fraction <= 0.05 + max_share
    assert rep.mean_residual.shape == (len(rep.patterns), 3)


def test_rare_events_concentrate_in_flagged_rows():
    # a rare pattern carries all events; the flagged rows must be enriched in them
    codes = np.zeros((1000, 3), dtype=int)
    events = np.zeros(1000, dtype=bool)
    events[::50] = True
    codes[events] = [1, 2, 3]
    rep = pattern_report(codes, share=0.02)
    assert events[rep.flagged].mean() > events.mean()


def test_mean_residual_profile():
    codes = np.array([[0], [0], [1]])
    rep = pattern_report(codes, np.array([[1.0], [3.0], [10.0]]), share=0.3)
    assert rep.patterns == [(1,), (0,)]
    np.testing.assert_allclose(rep.mean_residual[:, 0], [10.0, 2.0])
    assert "distinct patterns" in rep.summary()


# ------------------------------------------------------------------ writers


def test_acf_summary_and_writers(tmp_path):
    r = np.random.default_rng(11)
    y_true = r.normal(size=(200, 2, 3))
    y_pred = y_true + r.normal(size=y_true.shape)
    s = acf_summary(y_pred, y_true, horizon=1, max_lag=4)
    assert s["per_node"].shape == (2, 4)
    assert s["mean_abs"] == pytest.approx(np.abs(s["per_node"]).mean())
    write_acf_csv(tmp_path / "a.csv", s["per_node"][0])
    assert (tmp_path / "a.csv").read_text().splitlines()[:2] == ["lag,r", f"1,{float(s['per_node'][0, 0])!r}"]
    write_heatmap_csv(tmp_path / "h.csv", np.array([[1.0, np.nan], [0.5, 0.0]]))
    assert (tmp_path / "h.csv").read_text().splitlines()[2] == "0,1,"
