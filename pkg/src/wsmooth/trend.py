"""Weight smoothing with a smooth time trend: per-time predictive and GREG estimators."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .data import PopulationMargins, StratumSummary
from .errors import DimensionMismatch
from .glmm import FittedGlmm, ModelSpec, PQLOptions, fit_model, prediction_covariance, refit
from .smoothing import PseudoInclusion, greg_mean, predictive_mean, pseudo_inclusion


@dataclass(frozen=True)
class TrendFit:
    """A trend GLMM together with the ``(T, H)`` sample it was fitted to."""

    glmm: FittedGlmm
    summary: StratumSummary

    @property
    def mu(self) -> np.ndarray:
        return self.glmm.mu_table()

    @property
    def T(self) -> int:
        return self.glmm.design.T

    @property
    def H(self) -> int:
        return self.glmm.design.H

    def theta_blocks(self) -> np.ndarray:
        """Diagonal ``H x H`` blocks of the ``HT x HT`` prediction covariance, shape ``(T, H, H)``."""
        theta = prediction_covariance(self.glmm)
        H, T = self.H, self.T
        return np.stack([theta[t * H:(t + 1) * H, t * H:(t + 1) * H] for t in range(T)])


def fit_trend_model(summary: StratumSummary, spec: Optional[ModelSpec] = None, opts: Optional[PQLOptions] = None, start: Optional[TrendFit] = None) -> TrendFit:
    if summary.T is None:
        raise DimensionMismatch("trend model needs a (T, H) summary")
    spec = replace(spec or ModelSpec(), trend=True)
    if start is not None:
        glmm = refit(start.glmm, summary, opts)
    else:
        glmm = fit_model(summary, spec, opts)
    return TrendFit(glmm, summary)


def _check_margins(fit: TrendFit, margins: PopulationMargins):
    if margins.counts.shape != (fit.T, fit.H):
        raise DimensionMismatch(f"margins shape {margins.counts.shape} != ({fit.T}, {fit.H})")


def trend_estimates(fit: TrendFit, margins: PopulationMargins) -> np.ndarray:
    _check_margins(fit, margins)
    return predictive_mean(fit.summary.n, fit.summary.s, margins.counts, fit.mu)


def trend_pseudo_inclusion(summary: StratumSummary, margins: PopulationMargins, w0: float) -> List[PseudoInclusion]:
    """Pseudo-inclusion probabilities per time point from per-time weights."""
    return [pseudo_inclusion(summary.at_time(t), PopulationMargins(margins.counts[t - 1]), w0) for t in range(1, summary.T + 1)]


def _pi_table(pis) -> np.ndarray:
    if isinstance(pis, np.ndarray):
        return pis
    return np.stack([p.pi if isinstance(p, PseudoInclusion) else np.asarray(p) for p in pis])


def trend_greg_estimates(fit: TrendFit, margins: PopulationMargins, pis: Sequence[PseudoInclusion]) -> np.ndarray:
    _check_margins(fit, margins)
    pi = _pi_table(pis)
    if pi.shape != (fit.T, fit.H):
        raise DimensionMismatch("need one pseudo-inclusion vector per time point")
    return greg_mean(fit.summary.n, fit.summary.s, margins.counts, fit.mu, pi)


def trend_variance_analytical(fit: TrendFit, margins: PopulationMargins) -> np.ndarray:
    """Per-time quadratic forms in the diagonal blocks of the prediction covariance."""
    _check_margins(fit, margins)
    d = margins.counts - fit.summary.n
    blocks = fit.theta_blocks()
    return np.einsum("ti,tij,tj->t", d, blocks, d) / margins.total**2
