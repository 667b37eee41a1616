"""A prevalence trend over 30 time points.

The F4 population has a dip around t = 15 and random stratum effects. With
only a handful of respondents per stratum and time point, the per-time
post-stratified mean is noisy; the trend model borrows strength across both
strata and time.

Run with:  python3 demos/02_trend.py
"""

import numpy as np

from wsmooth import ModelSpec
from wsmooth.design import design_estimate
from wsmooth.data import PopulationMargins
from wsmooth.simulation import draw_sample, gen_population, sample_sizes
from wsmooth.trend import (
    fit_trend_model,
    trend_estimates,
    trend_greg_estimates,
    trend_pseudo_inclusion,
    trend_variance_analytical,
)

rng = np.random.default_rng(7)
pop = gen_population("F4", "N2", rng)
sample = draw_sample(pop, sample_sizes("N2", 2500), rng)
margins = pop.margins
T = sample.T

fit = fit_trend_model(sample, ModelSpec("npar", time_knots=T))
smooth = trend_estimates(fit, margins)
se = np.sqrt(trend_variance_analytical(fit, margins))
greg = trend_greg_estimates(fit, margins, trend_pseudo_inclusion(sample, margins, w0=3.0))
psm = np.array([design_estimate("psm", sample.at_time(t), PopulationMargins(margins.counts[t - 1])).point for t in range(1, T + 1)])

print(" t   truth    psm     npar (SE)         npar-greg")
for t in range(T):
    print(f"{t + 1:2d}  {pop.truth[t]:.4f}  {psm[t]:.4f}  {smooth[t]:.4f} ({se[t]:.4f})  {greg[t]:.4f}")

rmse = lambda est: np.sqrt(np.mean((est - pop.truth) ** 2))
print(f"\nroot mean squared error over time: psm {rmse(psm):.4f}, npar {rmse(smooth):.4f}, npar-greg {rmse(greg):.4f}")
print("variance components:", {k: round(v, 5) for k, v in fit.glmm.sigma2.items()})
