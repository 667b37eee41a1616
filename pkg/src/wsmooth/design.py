"""Design-based prevalence estimators: unweighted, post-stratified and weight-trimmed."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .data import PopulationMargins, StratumSummary, compute_weights
from .errors import AllTrimmed, DimensionMismatch, EmptyStratum


@dataclass(frozen=True)
class EstimateResult:
    point: float
    method: str
    variance: Optional[float] = None
    variance_method: Optional[str] = None
    ci: Optional[Tuple[float, float]] = None

    def with_variance(self, variance: float, variance_method: str, level: float = 0.95, scale: str = "logit") -> "EstimateResult":
        from .resampling import confidence_interval

        ci = confidence_interval(self.point, variance, level, scale=scale)
        return replace(self, variance=float(variance), variance_method=variance_method, ci=ci)

    @property
    def se(self) -> Optional[float]:
        return None if self.variance is None else float(np.sqrt(self.variance))


def _check(summary: StratumSummary, margins: PopulationMargins):
    if summary.n.ndim != 1 or margins.counts.ndim != 1:
        raise DimensionMismatch("design estimators take a single time point; slice with at_time()")
    if summary.n.shape != margins.counts.shape:
        raise DimensionMismatch(f"H mismatch: sample {summary.H}, margins {margins.H}")
    empty = np.flatnonzero(summary.n <= 0)
    if empty.size:
        raise EmptyStratum(int(empty[0]) + 1)


def unweighted_mean(summary: StratumSummary) -> EstimateResult:
    return EstimateResult(float(summary.s.sum() / summary.n.sum()), "unw")


def poststratified_mean(summary: StratumSummary, margins: PopulationMargins) -> EstimateResult:
    _check(summary, margins)
    return EstimateResult(float(margins.shares @ (summary.s / summary.n)), "psm")


def trimmed_weights(summary: StratumSummary, margins: PopulationMargins, w0: float):
    """Per-stratum trimmed weights and the renormalising constant ``gamma``.

    Strata with ``w_h > w0`` get ``w0``; the rest are scaled by ``gamma`` so the
    weighted sample size stays ``n``.
    """
    _check(summary, margins)
    w = compute_weights(summary, margins).w
    n = summary.n
    trimmed = w > w0
    denom = (n[~trimmed] * w[~trimmed]).sum()
    if denom <= 0:
        raise AllTrimmed(f"every stratum weight exceeds w0={w0}")
    capped = w0 * n[trimmed].sum() if trimmed.any() else 0.0
    gamma = (n.sum() - capped) / denom
    return np.where(trimmed, w0, gamma * w), float(gamma)


def trimmed_mean(summary: StratumSummary, margins: PopulationMargins, w0: float) -> EstimateResult:
    wt, _ = trimmed_weights(summary, margins, w0)
    return EstimateResult(float((wt * summary.s).sum() / summary.n.sum()), "trim")


def final_weights(kind: str, summary: StratumSummary, margins: Optional[PopulationMargins] = None, w0: float = 3.0) -> np.ndarray:
    if kind == "unw":
        return np.ones_like(summary.n)
    if kind == "psm":
        _check(summary, margins)
        return compute_weights(summary, margins).w
    if kind == "trim":
        return trimmed_weights(summary, margins, w0)[0]
    raise ValueError(f"unknown design estimator {kind!r}")


def design_variance(kind: str, summary: StratumSummary, margins: Optional[PopulationMargins] = None, w0: float = 3.0) -> float:
    """``n^-2 sum_h n_h w_h^2 ybar_h (1 - ybar_h)`` with the estimator's own final weights.

    No finite-population correction; ML form of the within-stratum variance.
    """
    if kind == "ps":
        kind = "psm"
    wt = final_weights(kind, summary, margins, w0)
    n = summary.n
    pos = n > 0
    yb = summary.s[pos] / n[pos]
    return float((n[pos] * wt[pos] ** 2 * yb * (1.0 - yb)).sum() / n.sum() ** 2)


def design_estimate(kind: str, summary: StratumSummary, margins: Optional[PopulationMargins] = None, w0: float = 3.0, level: float = 0.95, scale: str = "logit") -> EstimateResult:
    """Point estimate, closed-form variance and CI in one call."""
    if kind == "unw":
        res = unweighted_mean(summary)
    elif kind in ("psm", "ps"):
        res = poststratified_mean(summary, margins)
    elif kind == "trim":
        res = trimmed_mean(summary, margins, w0)
    else:
        raise ValueError(f"unknown design estimator {kind!r}")
    return res.with_variance(design_variance(res.method, summary, margins, w0), "closed-form", level, scale)
