import types

import numpy as np
import pytest
from scipy.special import expit, logit

from wsmooth.data import PopulationMargins, StratumSummary
from wsmooth.design import poststratified_mean
from wsmooth.errors import DimensionMismatch
from wsmooth.glmm import ModelSpec, fit_model
from wsmooth.smoothing import ws_estimate
from wsmooth.trend import (
    TrendFit,
    fit_trend_model,
    trend_estimates,
    trend_greg_estimates,
    trend_pseudo_inclusion,
    trend_variance_analytical,
)

H18 = np.arange(1, 19, dtype=float)


def stub_trend(mu, summary):
    glmm = types.SimpleNamespace(mu_table=lambda: np.asarray(mu, float), design=types.SimpleNamespace(T=mu.shape[0], H=mu.shape[1]))
    return TrendFit(glmm, summary)


def test_worked_example_replicated_over_time():
    sm = StratumSummary(np.full((2, 2), 50.0), np.array([[10.0, 20.0], [10.0, 20.0]]))
    m = PopulationMargins(np.array([[100.0, 900.0], [100.0, 900.0]]))
    fit = stub_trend(np.array([[0.25, 0.35], [0.25, 0.35]]), sm)
    pis = np.array([[0.4, 1 / 15], [0.4, 1 / 15]])
    np.testing.assert_allclose(trend_greg_estimates(fit, m, pis), [0.37125, 0.37125], atol=1e-12)
    np.testing.assert_allclose(trend_estimates(fit, m), [0.34, 0.34], atol=1e-12)
    computed = trend_pseudo_inclusion(sm, m, 1.5)
    np.testing.assert_allclose(np.stack([p.pi for p in computed]), pis, rtol=1e-12)


def test_reductions_to_per_time_psm():
    rng = np.random.default_rng(1)
    n = rng.integers(5, 40, (3, 4)).astype(float)
    sm = StratumSummary(n, np.floor(n * rng.random((3, 4))))
    m = PopulationMargins(rng.integers(200, 900, (3, 4)).astype(float))
    psm = [poststratified_mean(sm.at_time(t), PopulationMargins(m.counts[t - 1])).point for t in (1, 2, 3)]
    fit = stub_trend(sm.ybar, sm)
    np.testing.assert_allclose(trend_estimates(fit, m), psm, atol=1e-12)
    other = stub_trend(rng.random((3, 4)), sm)
    np.testing.assert_allclose(trend_greg_estimates(other, m, sm.n / m.counts), psm, atol=1e-12)
    with pytest.raises(DimensionMismatch):
        trend_estimates(fit, PopulationMargins(np.ones((2, 4))))


def test_single_stratum_scalar_oracle():
    n = np.array([[10.0], [20.0]])
    s = np.array([[3.0], [5.0]])
    N = np.array([[100.0], [80.0]])
    mu = np.array([[0.4], [0.2]])
    fit = stub_trend(mu, StratumSummary(n, s))
    expected = [(10 * 0.3 + 90 * 0.4) / 100, (20 * 0.25 + 60 * 0.2) / 80]
    np.testing.assert_allclose(trend_estimates(fit, PopulationMargins(N)), expected, atol=1e-14)


def test_time_constant_data_gives_flat_trend():
    T = 8
    n = np.full((T, 18), 2000.0)
    p = expit(-1 + 2 * np.exp(-H18 / 9))
    sm = StratumSummary(n, np.round(n * p[None, :]))
    fit = fit_trend_model(sm, ModelSpec("npar", time_knots=T))
    eta = logit(fit.mu)
    assert np.ptp(eta - eta.mean(axis=0), axis=0).max() < 1e-3


def test_recovers_f1_time_function():
    T = 30
    t = np.arange(1, T + 1, dtype=float)
    dt = -2 + 3 * np.exp(-((t - 15) ** 2) / 50)
    dh = -1 + 2 * np.exp(-H18 / 9)
    n = np.full((T, 18), 1e5)
    sm = StratumSummary(n, n * expit(dt[:, None] + dh[None, :]))
    fit = fit_trend_model(sm, ModelSpec("npar", time_knots=T))
    est = logit(fit.mu).mean(axis=1)
    shift = (est - dt).mean()
    assert np.abs(est - dt - shift).max() < 0.05


def test_single_stratum_time_fit():
    T = 10
    t = np.arange(1, T + 1, dtype=float)
    n = np.full((T, 1), 500.0)
    sm = StratumSummary(n, np.round(n * expit(-1 + 0.1 * t)[:, None]))
    fit = fit_trend_model(sm, ModelSpec("xre", time_knots=T))
    assert fit.mu.shape == (T, 1)
    assert np.corrcoef(fit.mu[:, 0], t)[0, 1] > 0.95


def f2_like(seed, T=6, n=60):
    rng = np.random.default_rng(seed)
    t = np.arange(1, T + 1, dtype=float)
    p = expit((-2 + 3 * np.exp(-((t - 3) ** 2) / 5))[:, None] + (-1 + 2 * np.exp(-H18 / 9))[None, :])
    nn = np.full((T, 18), float(n))
    return StratumSummary(nn, rng.binomial(n, p).astype(float))


def test_variance_uses_diagonal_blocks_only():
    sm = f2_like(3)
    fit = fit_trend_model(sm, ModelSpec("npar", time_knots=6))
    m = PopulationMargins(np.full((6, 18), 1000.0))
    v = trend_variance_analytical(fit, m)
    blocks = fit.theta_blocks()
    for k in range(6):
        np.testing.assert_array_equal(blocks[k], blocks[k].T)
        assert np.linalg.eigvalsh(blocks[k]).min() >= -1e-12 * np.abs(blocks[k]).max()
    d = m.counts - sm.n
    expected = [d[k] @ blocks[k] @ d[k] / 18000.0**2 for k in range(6)]
    np.testing.assert_allclose(v, expected, rtol=1e-12)
    census = PopulationMargins(sm.n)
    np.testing.assert_array_equal(trend_variance_analytical(TrendFit(fit.glmm, sm), census), 0.0)


def test_identical_independent_time_blocks_equal_variance():
    base = f2_like(4, T=1).s[0]
    T = 5
    sm = StratumSummary(np.full((T, 18), 60.0), np.tile(base, (T, 1)))
    m = PopulationMargins(np.full((T, 18), 900.0))
    # without a time function nothing links or distinguishes the time points
    v = trend_variance_analytical(fit_trend_model(sm, ModelSpec("npar", time_knots=0)), m)
    np.testing.assert_allclose(v, v[0], rtol=1e-10)
    # with one, the curve's uncertainty is mirror-symmetric about the middle time point
    v = trend_variance_analytical(fit_trend_model(sm, ModelSpec("npar", time_knots=T)), m)
    np.testing.assert_allclose(v, v[::-1], rtol=1e-6)


def test_nesting_with_time_function_removed():
    # with no time function, per-time predictions equal a pooled prevalence fit applied at each t
    sm = f2_like(5)
    fit = fit_trend_model(sm, ModelSpec("npar", time_knots=0))
    pooled = fit_model(sm.pooled(), ModelSpec("npar"))
    np.testing.assert_allclose(fit.mu, np.broadcast_to(pooled.mu, fit.mu.shape), atol=1e-6)
    m = PopulationMargins(np.full((6, 18), 1000.0))
    for t in range(1, 7):
        mt = PopulationMargins(m.counts[t - 1])
        assert trend_estimates(fit, m)[t - 1] == pytest.approx(ws_estimate(pooled, sm.at_time(t), mt).point, abs=1e-6)
    assert fit.glmm.design.X.shape[1] == 2


def test_trend_needs_time_axis():
    with pytest.raises(DimensionMismatch):
        fit_trend_model(StratumSummary([5.0, 5.0], [1.0, 2.0]))
