"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

The simulation-based criteria (1-3) run the full 25 x 10 replicate designs and
take most of an hour on a single core.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.special import expit

from wsmooth.cli import main
from wsmooth.data import PopulationMargins, StratumSummary
from wsmooth.design import design_variance, poststratified_mean, trimmed_mean, trimmed_weights
from wsmooth.glmm import ModelSpec, fit_model
from wsmooth.resampling import BootstrapConfig, bootstrap_variance, confidence_interval, jackknife_from_estimates
from wsmooth.simulation import (
    PREVALENCE_MODELS,
    ScenarioConfig,
    draw_sample,
    gen_population,
    mse_decompose,
    run_scenario,
    sample_sizes,
)
from wsmooth.smoothing import pseudo_inclusion, ws_estimate, ws_greg_estimate, ws_variance_analytical
from wsmooth.trend import trend_greg_estimates

from test_cli import write_margins, write_sample
from test_smoothing import stub_fit
from test_trend import stub_trend

pytestmark = pytest.mark.slow

FULL_SET = ("psm", "unw", "npar", "npar-greg")
_RUNS = {}


def benchmark_run(model):
    """One N(1) / n=5000 / 25x10 scenario per population model, shared by criteria 1 and 2."""
    if model not in _RUNS:
        estimators = FULL_SET if model in ("NULL", "QUAD0") else ("npar-greg",)
        cfg = ScenarioConfig(
            model=model,
            population_size="N1",
            sample_size=5000,
            populations=25,
            samples_per_population=10,
            estimators=estimators,
            G=250,
            seed=20110200 + PREVALENCE_MODELS.index(model),
        )
        t0 = time.time()
        _RUNS[model] = run_scenario(cfg)
        print(f"[{model}] {time.time() - t0:.0f}s")
    return _RUNS[model]


def test_criterion_1_benchmark_mse(record_criterion):
    targets = [("NULL", "psm", 1.70), ("NULL", "unw", 0.46), ("QUAD0", "unw", 16.09), ("QUAD0", "npar", 1.63), ("QUAD0", "npar-greg", 1.52)]
    parts, ok = [], True
    for model, est, target in targets:
        got = benchmark_run(model).row(est)["mse"] * 1e4
        rel = abs(got - target) / target
        ok &= rel <= 0.35
        parts.append(f"{model}/{est} {got:.2f} vs {target} ({rel:+.0%})".replace("+", ""))
    record_criterion("1 benchmark MSE x1e4 within 35%", ok, "; ".join(parts))
    assert ok


def test_criterion_2_benchmark_coverage(record_criterion):
    psm = benchmark_run("NULL").row("psm")["coverage"] * 100
    unw = benchmark_run("QUAD0").row("unw")["coverage"] * 100
    greg = {m: benchmark_run(m).row("npar-greg")["coverage"] * 100 for m in PREVALENCE_MODELS}
    ok_psm = abs(psm - 95.2) <= 3.0
    ok_unw = unw <= 2.0
    ok_greg = all(v >= 90.0 for v in greg.values())
    detail = f"psm NULL {psm:.1f}% (95.2 +-3); unw QUAD0 {unw:.1f}% (<=2); npar-greg " + ", ".join(f"{m} {v:.1f}" for m, v in greg.items()) + " (>=90)"
    record_criterion("2 benchmark CI coverage", ok_psm and ok_unw and ok_greg, detail)
    assert ok_psm and ok_unw and ok_greg


def test_criterion_3_trend_valley(record_criterion):
    cfg = ScenarioConfig(model="F4", population_size="N2", sample_size=2500, populations=25, samples_per_population=10, estimators=("npar", "npar-greg"), G=250, seed=20110400)
    t0 = time.time()
    res = run_scenario(cfg)
    print(f"[F4] {time.time() - t0:.0f}s")
    valley = [(t, res.row("npar", t)["mse"], res.row("npar-greg", t)["mse"]) for t in (14, 15, 16)]
    cover = np.array([res.row("npar-greg", t)["coverage"] for t in range(1, 31)]) * 100
    ok_mse = all(a > b for _, a, b in valley)
    ok_cov = cover.min() >= 90.0
    detail = "MSE x1e4 npar/npar-greg " + ", ".join(f"t={t} {a * 1e4:.2f}/{b * 1e4:.2f}" for t, a, b in valley)
    detail += f"; npar-greg coverage min {cover.min():.1f}% at t={int(cover.argmin()) + 1} (>=90)"
    record_criterion("3 F4 trend valley", ok_mse and ok_cov, detail)
    assert ok_mse and ok_cov


def test_criterion_4_exact_identities(record_criterion, two_strata):
    rng = np.random.default_rng(44)
    worst = 0.0

    def close(a, b, tol=1e-12):
        nonlocal worst
        err = abs(a - b) / max(1.0, abs(b))
        worst = max(worst, err)
        return err <= tol

    checks = []
    for _ in range(200):
        H = int(rng.integers(2, 20))
        n = rng.integers(1, 300, H).astype(float)
        sm = StratumSummary(n, np.floor(n * rng.random(H)))
        m = PopulationMargins(n + rng.integers(0, 10_000, H))
        psm = poststratified_mean(sm, m).point
        checks.append(close(trimmed_mean(sm, m, math.inf).point, psm))
        checks.append(close(ws_greg_estimate(stub_fit(rng.random(H)), sm, m, sm.n / m.counts).point, psm))
        census = StratumSummary(m.counts, np.floor(m.counts * rng.random(H)))
        checks.append(close(ws_estimate(stub_fit(rng.random(H)), census, m).point, census.s.sum() / m.total))
    # hand oracles
    s, m = two_strata
    wt, gamma = trimmed_weights(s, m, 1.5)
    pi = pseudo_inclusion(s, m, 1.5)
    lo, hi = confidence_interval(0.5, 0.05**2)
    bias, var, mse = mse_decompose([[0.4, 0.6]], [0.5])
    tf = stub_trend(np.array([[0.25, 0.35]] * 2), StratumSummary(np.full((2, 2), 50.0), np.array([[10.0, 20.0]] * 2)))
    oracles = [
        (trimmed_mean(s, m, 1.5).point, 0.35),
        (gamma, 2.5),
        (design_variance("ps", s, m), 3.92e-3),
        (design_variance("unw", StratumSummary([100.0], [50.0])), 2.5e-3),
        (ws_estimate(stub_fit([0.25, 0.35]), s, m).point, 0.34),
        (ws_greg_estimate(stub_fit([0.25, 0.35]), s, m, pi).point, 0.37125),
        (pi.gamma, 0.8),
        (pi.pi[0], 0.4),
        (pi.pi[1], 1 / 15),
        (lo, expit(-1.959963984540054 * 0.05 / 0.25)),
        (hi, expit(1.959963984540054 * 0.05 / 0.25)),
        (var, 0.01),
        (mse, 0.01),
        (bias, 0.0),
        (jackknife_from_estimates([0.41, 0.47]), 0.06**2 / 4),
        (expit(-1 + 2 * math.exp(-1)), 1 / (1 + math.exp(1 - 2 / math.e))),
    ]
    tf_vals = trend_greg_estimates(tf, PopulationMargins(np.array([[100.0, 900.0]] * 2)), np.array([[0.4, 1 / 15]] * 2))
    oracles += [(tf_vals[0], 0.37125), (tf_vals[1], 0.37125)]
    checks += [close(a, b, 1e-10) for a, b in oracles]
    checks.append((round(lo, 4), round(hi, 4)) == (0.4032, 0.5968))
    ok = all(checks)
    record_criterion("4 exact identities", ok, f"{len(checks)} checks, worst relative error {worst:.1e}")
    assert ok


def test_criterion_5_variance_agreement(record_criterion):
    pop = gen_population("NULL", "N2", np.random.default_rng(20110500))
    n_h = sample_sizes("N2", 2500)
    rng = np.random.default_rng(20110501)
    samples = [draw_sample(pop, n_h, rng) for _ in range(250)]
    parts, ok = [], True
    for family in ("xre", "lin", "npar"):
        points, analytical, boot = [], [], []
        for k, sm in enumerate(samples):
            fit = fit_model(sm, ModelSpec(family))
            points.append(ws_estimate(fit, sm, pop.margins).point)
            analytical.append(ws_variance_analytical(fit, sm, pop.margins))
            if k < 5:
                boot.append(bootstrap_variance(fit, sm, pop.margins, BootstrapConfig(B=250, seed=k)))
        se = {"mc": np.std(points, ddof=1), "analytical": np.sqrt(np.mean(analytical)), "bootstrap": np.sqrt(np.mean(boot))}
        spread = max(se.values()) / min(se.values())
        ok &= spread <= 1.30
        parts.append(f"{family} MC {se['mc']:.5f} an {se['analytical']:.5f} bs {se['bootstrap']:.5f} (max/min {spread:.2f})")
    record_criterion("5 SE agreement within 30%", ok, "; ".join(parts))
    assert ok


def test_criterion_6_glmm_recovery(record_criterion):
    h = np.arange(1, 19, dtype=float)
    delta = -2 + 0.2 * h
    n = np.full(18, 1e7)
    fit = fit_model(StratumSummary(n, n * expit(delta)), ModelSpec("npar"))
    err = np.abs(fit.eta - delta).max()
    homo = fit_model(StratumSummary(np.full(18, 400.0), np.full(18, 120.0)), ModelSpec("xre"))
    sig = homo.sigma2["stratum"]
    ok = err <= 1e-2 and sig < 1e-6
    record_criterion("6 GLMM recovery", ok, f"NPAR max |eta - delta| {err:.1e} (<=1e-2); XRE sigma2 {sig:.1e} (<1e-6)")
    assert ok


def test_criterion_7_determinism(record_criterion, tmp_path):
    pop = gen_population("QUAD1", "N2", np.random.default_rng(70))
    sm = draw_sample(pop, sample_sizes("N2", 2500), np.random.default_rng(71))
    sample = write_sample(tmp_path / "s.csv", sm.n, sm.s)
    margins = write_margins(tmp_path / "m.csv", pop.N)
    tpop = gen_population("F2", "N2", np.random.default_rng(72))
    tsm = draw_sample(tpop, sample_sizes("N2", 500), np.random.default_rng(73))
    tsample = write_sample(tmp_path / "ts.csv", tsm.n, tsm.s, with_t=True)
    tmargins = write_margins(tmp_path / "tm.csv", tpop.N, with_t=True)
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps({"model": "EXP1", "population_size": "N2", "sample_size": 2500, "populations": 2, "samples_per_population": 3, "estimators": ["psm", "trim", "xre:bootstrap", "npar", "npar-greg"], "B": 20, "G": 20, "seed": 7}))
    commands = {
        "estimate-bootstrap": (["estimate", sample, margins, "--model", "npar", "--variance", "bootstrap", "--B", 40, "--seed", 5], ["estimate.json", "estimate.csv"]),
        "estimate-jackknife": (["estimate", sample, margins, "--model", "lin", "--greg", "--G", 40, "--seed", 5], ["estimate.json", "estimate.csv"]),
        "trend-greg": (["trend", tsample, tmargins, "--model", "npar", "--greg", "--G", 20, "--time-knots", 10, "--seed", 5], ["trend.json", "trend.csv"]),
        "simulate": (["simulate", scen], ["metrics.csv", "replicates.csv"]),
    }
    ok, parts = True, []
    for name, (argv, files) in commands.items():
        outs = []
        for k, threads in enumerate((1, 2, 1)):
            out = tmp_path / f"{name}-{k}"
            assert main([str(a) for a in argv] + ["--threads", str(threads), "--out", str(out)]) == 0
            manifest = json.loads((out / "manifest.json").read_text())
            manifest.pop("timing")
            outs.append(tuple((out / f).read_bytes() for f in files) + (json.dumps(manifest, sort_keys=True),))
        same = len(set(outs)) == 1
        ok &= same
        parts.append(f"{name} {'identical' if same else 'DIFFERENT'}")
    record_criterion("7 determinism (threads 1, 2, 1)", ok, "; ".join(parts))
    assert ok
