"""Weight smoothing for post-stratified survey prevalence and trend estimation."""

__version__ = "0.1.0"

from .data import (
    PopulationMargins,
    StratumSummary,
    StratumWeights,
    SurveySample,
    aggregate,
    compute_weights,
    disaggregate,
    load_margins,
    load_sample,
)
from .design import (
    EstimateResult,
    design_estimate,
    design_variance,
    poststratified_mean,
    trimmed_mean,
    trimmed_weights,
    unweighted_mean,
)
from .errors import WsmoothError
from .glmm import ModelSpec, PQLOptions, FittedGlmm, build_design, fit_model, fit_pql, prediction_covariance, predict_strata, refit
from .resampling import (
    BootstrapConfig,
    JackknifeConfig,
    bootstrap_variance,
    confidence_interval,
    jackknife_variance,
)
from .smoothing import PseudoInclusion, pseudo_inclusion, ws_estimate, ws_greg_estimate, ws_variance_analytical
from .splines import place_knots, thin_plate_basis, truncated_linear_basis
from .trend import (
    TrendFit,
    fit_trend_model,
    trend_estimates,
    trend_greg_estimates,
    trend_pseudo_inclusion,
    trend_variance_analytical,
)
