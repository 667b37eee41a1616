"""Parametric bootstrap and grouped jackknife variance estimation, and CI construction."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit, logit
from scipy.stats import norm

from .data import PopulationMargins, StratumSummary, SurveySample
from .errors import DegeneratePoint, EmptyStratum, NotConverged, NumericalBreakdown
from .glmm import FittedGlmm, PQLOptions, refit
from .smoothing import predictive_mean

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 250
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")


@dataclass(frozen=True)
class JackknifeConfig:
    G: int = 250
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("G must be > 1")


@dataclass(frozen=True)
class BootstrapPopulation:
    ybar: Union[float, np.ndarray]
    prob: np.ndarray
    positives: np.ndarray


def confidence_interval(point: float, variance: float, level: float = 0.95, scale: str = "logit") -> Tuple[float, float]:
    """Normal-theory interval, built on the logit scale and mapped back to ``(0, 1)``.

    ``scale="identity"`` gives the plain interval clamped to ``[0, 1]``; the
    logit interval falls back to it (with a warning) when ``point`` is not
    strictly inside ``(0, 1)``.
    """
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    z = norm.ppf(0.5 + level / 2.0)
    se = np.sqrt(variance)
    if scale == "logit":
        if 0.0 < point < 1.0:
            half = z * se / (point * (1.0 - point))
            centre = logit(point)
            # expit(logit(p)) can miss p by an ulp; keep the point inside its own interval
            return float(min(expit(centre - half), point)), float(max(expit(centre + half), point))
        warnings.warn(str(DegeneratePoint(f"point {point} on the boundary; using identity-scale CI")), RuntimeWarning, stacklevel=2)
    elif scale != "identity":
        raise ValueError(f"unknown CI scale {scale!r}")
    return float(max(0.0, point - z * se)), float(min(1.0, point + z * se))


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def bootstrap_population(fit: FittedGlmm, margins: PopulationMargins, rng: np.random.Generator) -> BootstrapPopulation:
    """Draw one finite population from the fitted model.

    Fixed effects and the spline (and time) coefficients stay at their
    estimates and empirical Bayes predictions; the exchangeable stratum effects
    are redrawn from ``N(0, sigma2)``.
    """
    design = fit.design
    Zs = design.Z[:, design.block("stratum")]
    u = rng.normal(0.0, np.sqrt(fit.sigma2["stratum"]), size=Zs.shape[1])
    eta = fit.eta - Zs @ fit.random_block("stratum") + Zs @ u
    prob = expit(eta)
    N = np.rint(margins.counts.ravel()).astype(np.int64)
    positives = rng.binomial(N, prob)
    if design.T:
        shape = (design.T, design.H)
        prob, positives, Nt = prob.reshape(shape), positives.reshape(shape), N.reshape(shape)
        ybar = positives.sum(axis=1) / Nt.sum(axis=1)
    else:
        ybar = float(positives.sum() / N.sum())
    return BootstrapPopulation(ybar, prob, positives)


def draw_stratified(positives, N, n, rng: np.random.Generator) -> StratumSummary:
    """Stratified SRS without replacement: hypergeometric positives per cell."""
    positives = np.asarray(positives, dtype=np.int64)
    N = np.rint(np.asarray(N)).astype(np.int64)
    n = np.rint(np.asarray(n)).astype(np.int64)
    s = rng.hypergeometric(positives, N - positives, n)
    return StratumSummary(n.astype(float), s.astype(float))


def replicate_variance(estimates, truths) -> Union[float, np.ndarray]:
    """Mean squared deviation between replicate estimates and replicate truths, ignoring failed (NaN) replicates."""
    d = np.asarray(estimates, dtype=float) - np.asarray(truths, dtype=float)
    return np.nanmean(d**2, axis=0)


def _bootstrap_replicate(fit, summary, margins, seed, b, opts):
    rng = _rng(seed, b)
    pop = bootstrap_population(fit, margins, rng)
    sample = draw_stratified(pop.positives, margins.counts, summary.n, rng)
    try:
        fit_b = refit(fit, sample, opts)
    except (NotConverged, NumericalBreakdown, EmptyStratum):
        return np.nan * np.asarray(pop.ybar), pop.ybar
    est = predictive_mean(sample.n, sample.s, margins.counts, fit_b.mu_table())
    return est, pop.ybar


def bootstrap_replicates(fit: FittedGlmm, summary: StratumSummary, margins: PopulationMargins, cfg: BootstrapConfig, opts: Optional[PQLOptions] = None):
    """Replicate predictors and bootstrap-population means, shape ``(B,)`` or ``(B, T)``.

    Replicate ``b`` draws from its own stream seeded by ``(seed, b)``, so results
    do not depend on ``n_jobs``.
    """
    out = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_bootstrap_replicate)(fit, summary, margins, cfg.seed, b, opts) for b in range(cfg.B)
    )
    est = np.array([o[0] for o in out], dtype=float)
    truth = np.array([o[1] for o in out], dtype=float)
    return est, truth


def bootstrap_variance(fit: FittedGlmm, summary: StratumSummary, margins: PopulationMargins, cfg: BootstrapConfig = BootstrapConfig(), opts: Optional[PQLOptions] = None):
    """Parametric bootstrap prediction variance of the weight-smoothed estimator (per time point for trend fits)."""
    est, truth = bootstrap_replicates(fit, summary, margins, cfg, opts)
    failed = int(np.isnan(est).any(axis=-1).sum()) if est.ndim > 1 else int(np.isnan(est).sum())
    if failed:
        log.warning("bootstrap: %d of %d replicates failed and were dropped", failed, cfg.B)
    if failed == cfg.B:
        raise NumericalBreakdown("every bootstrap replicate failed")
    return replicate_variance(est, truth)


def jackknife_groups(sample: SurveySample, G: int, rng: Optional[np.random.Generator] = None, by_time: Optional[bool] = None) -> List[np.ndarray]:
    """Partition unit indices into ``G`` jackknife subgroups.

    Units are stably sorted by stratum (by time first when ``by_time``), cut
    into consecutive blocks of ``G`` and each block hands one unit to each
    subgroup in random order. A short final block goes to distinct subgroups,
    so subgroup sizes differ by at most one per time point.
    """
    if G < 2:
        raise ValueError("G must be > 1")
    by_time = sample.has_time if by_time is None else by_time
    rng = rng if rng is not None else np.random.default_rng(0)
    if by_time:
        if sample.t is None:
            raise ValueError("time-wise groups need a time index")
        order = np.lexsort((sample.stratum, sample.t))
        periods = sample.t[order]
    else:
        order = np.argsort(sample.stratum, kind="stable")
        periods = np.zeros(order.size, dtype=np.int64)
    if np.bincount(periods).max() < G:
        raise ValueError(f"G={G} exceeds the number of units per period")
    group = np.empty(order.size, dtype=np.int64)
    start = 0
    for count in np.bincount(periods):
        if count == 0:
            continue
        for b0 in range(start, start + count, G):
            size = min(G, start + count - b0)
            group[b0:b0 + size] = rng.permutation(G)[:size]
        start += count
    assignment = np.empty(order.size, dtype=np.int64)
    assignment[order] = group
    return [np.flatnonzero(assignment == g) for g in range(G)]


def reduced_summaries(sample: SurveySample, groups: List[np.ndarray], H: int, T: Optional[int] = None) -> List[StratumSummary]:
    """Summaries of the sample with each group removed in turn (empty strata allowed)."""
    if T is None:
        cell = sample.stratum - 1
        shape = (H,)
    else:
        cell = (sample.t - 1) * H + (sample.stratum - 1)
        shape = (T, H)
    size = int(np.prod(shape))
    n_full = np.bincount(cell, minlength=size).astype(float)
    s_full = np.bincount(cell, weights=sample.y, minlength=size)
    out = []
    for idx in groups:
        rn = np.bincount(cell[idx], minlength=size)
        rs = np.bincount(cell[idx], weights=sample.y[idx], minlength=size)
        out.append(StratumSummary((n_full - rn).reshape(shape), (s_full - rs).reshape(shape)))
    return out


def jackknife_from_estimates(estimates) -> Union[float, np.ndarray]:
    """``(G-1)/G * sum_g (est_g - mean)^2`` (per column for vector estimates)."""
    est = np.asarray(estimates, dtype=float)
    G = est.shape[0]
    return (G - 1) / G * ((est - est.mean(axis=0)) ** 2).sum(axis=0)


def jackknife_variance(
    estimator: Callable[[StratumSummary], Union[float, np.ndarray]],
    sample: SurveySample,
    G: int,
    H: int,
    T: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    n_jobs: int = 1,
):
    """Grouped jackknife variance of ``estimator`` evaluated on leave-one-group-out samples.

    ``estimator`` maps a reduced summary to an estimate; it must refit any
    model itself and keep design quantities fixed at their full-sample values.
    With ``T`` set, groups are formed within each time point.
    """
    groups = jackknife_groups(sample, G, rng, by_time=T is not None)
    reduced = reduced_summaries(sample, groups, H, T)
    est = Parallel(n_jobs=n_jobs)(delayed(estimator)(r) for r in reduced)
    return jackknife_from_estimates(est)
