"""Model-based (weight-smoothed) prevalence estimators and their GREG adjustment."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .data import PopulationMargins, StratumSummary, compute_weights
from .design import EstimateResult
from .errors import AllTrimmed, DimensionMismatch, NegativeGamma
from .glmm import FittedGlmm, prediction_covariance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoInclusion:
    """Trimmed pseudo-inclusion probabilities ``pi_h = nhat_h / N_h``."""

    pi: np.ndarray
    n_hat: np.ndarray
    gamma: float
    trimmed: np.ndarray


def _check(fit_mu: np.ndarray, summary: StratumSummary, margins: PopulationMargins):
    if not (fit_mu.shape == summary.n.shape == margins.counts.shape):
        raise DimensionMismatch(
            f"shapes differ: fit {fit_mu.shape}, sample {summary.n.shape}, margins {margins.counts.shape}"
        )


def predictive_mean(n, s, N, mu):
    """Observed positives plus model predictions for the unsampled units, over ``N``."""
    return (s.sum(axis=-1) + ((N - n) * mu).sum(axis=-1)) / N.sum(axis=-1)


def greg_mean(n, s, N, mu, pi):
    """GREG form: predictions for everyone plus ``1/pi``-weighted residuals of the sample."""
    expanded = n / pi
    return ((s / pi) + (N - expanded) * mu).sum(axis=-1) / N.sum(axis=-1)


def ws_estimate(fit: FittedGlmm, summary: StratumSummary, margins: PopulationMargins) -> EstimateResult:
    mu = fit.mu_table()
    _check(mu, summary, margins)
    return EstimateResult(float(predictive_mean(summary.n, summary.s, margins.counts, mu)), fit.spec.family)


def ws_variance_analytical(fit: FittedGlmm, summary: StratumSummary, margins: PopulationMargins) -> float:
    """``(N - n)^T Theta (N - n) / N^2``."""
    _check(fit.mu_table(), summary, margins)
    d = margins.counts - summary.n
    theta = prediction_covariance(fit)
    return float(d @ theta @ d / margins.counts.sum() ** 2)


def pseudo_inclusion(summary: StratumSummary, margins: PopulationMargins, w0: float) -> PseudoInclusion:
    """Pseudo-inclusion probabilities built from trimmed post-stratification weights.

    Trimmed strata (``w_h > w0``) get ``nhat_h = (N_h/N) / (w0/n)``; these are
    computed first, then ``gamma`` rescales the remaining strata so that
    ``sum nhat = n``. Ties ``w_h == w0`` count as untrimmed.
    """
    if summary.n.shape != margins.counts.shape or summary.n.ndim != 1:
        raise DimensionMismatch("pseudo_inclusion takes matching (H,) sample and margins")
    w = compute_weights(summary, margins).w
    n = summary.n
    n_tot = n.sum()
    trimmed = w > w0
    if trimmed.all():
        raise AllTrimmed(f"every stratum weight exceeds w0={w0}")
    n_hat = np.empty_like(n)
    n_hat[trimmed] = margins.shares[trimmed] / (w0 / n_tot)
    rest = n_tot - n_hat[trimmed].sum()
    if rest <= 0:
        raise NegativeGamma("trimmed strata already account for the whole sample")
    gamma = rest / n[~trimmed].sum()
    n_hat[~trimmed] = gamma * n[~trimmed]
    return PseudoInclusion(n_hat / margins.counts, n_hat, float(gamma), trimmed)


def ws_greg_estimate(fit: FittedGlmm, summary: StratumSummary, margins: PopulationMargins, pi) -> EstimateResult:
    pi_arr = pi.pi if isinstance(pi, PseudoInclusion) else np.asarray(pi, dtype=float)
    mu = fit.mu_table()
    _check(mu, summary, margins)
    if pi_arr.shape != mu.shape:
        raise DimensionMismatch("pi must have one entry per stratum")
    point = float(greg_mean(summary.n, summary.s, margins.counts, mu, pi_arr))
    if not np.isfinite(point):
        raise ValueError("non-finite GREG estimate")
    if not 0.0 <= point <= 1.0:
        warnings.warn(f"GREG estimate {point:.6g} lies outside [0, 1]", RuntimeWarning, stacklevel=2)
    return EstimateResult(point, f"{fit.spec.family}-greg")
