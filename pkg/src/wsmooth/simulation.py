"""Synthetic populations, repeated sampling and bias / MSE / coverage metrics.

Populations follow the 18-stratum designs with fixed population and sample
sizes; trend populations add 30 equally spaced time points with constant
stratum sizes.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .data import PopulationMargins, StratumSummary, disaggregate
from .design import design_estimate
from .errors import InsufficientReplicates, OversampledStratum, ScenarioError, WsmoothError
from .glmm import ModelSpec, PQLOptions, fit_model, refit
from .resampling import (
    BootstrapConfig,
    bootstrap_variance,
    confidence_interval,
    jackknife_variance,
)
from .smoothing import greg_mean, pseudo_inclusion, ws_estimate, ws_variance_analytical
from .trend import (
    TrendFit,
    trend_estimates,
    trend_pseudo_inclusion,
    trend_variance_analytical,
)

log = logging.getLogger(__name__)

# Population and sample sizes per stratum (18 strata).
TABLE1 = {
    "N1": np.array([300, 300, 320, 320, 340, 340, 360, 360, 360, 360, 360, 360, 340, 340, 320, 320, 300, 300]) * 1000,
    "N1/n1": np.array([50, 150, 300, 750, 1250, 1500, 2000, 2750, 3750, 3750, 2750, 2000, 1500, 1000, 800, 400, 200, 100]),
    "N1/n2": np.array([10, 30, 60, 150, 250, 300, 400, 550, 750, 750, 550, 400, 300, 200, 160, 80, 40, 20]),
    "N2": np.array([7500, 7500, 8000, 8000, 8500, 8500, 9000, 9000, 9000, 9000, 9000, 9000, 8500, 8500, 8000, 8000, 7500, 7500]),
    "N2/n1": np.array([5, 15, 30, 75, 125, 150, 200, 275, 375, 375, 275, 200, 150, 100, 80, 40, 20, 10]),
    "N2/n2": np.array([1, 3, 6, 15, 25, 30, 40, 55, 75, 75, 55, 40, 30, 20, 16, 8, 4, 2]),
}
TABLE1_TOTALS = {"N1": 6_000_000, "N1/n1": 25_000, "N1/n2": 5_000, "N2": 150_000, "N2/n1": 2_500, "N2/n2": 500}
for _key, _total in TABLE1_TOTALS.items():
    assert TABLE1[_key].sum() == _total, _key

H_SIM = 18
T_SIM = 30
SIGMA2_SIM = 0.02


def _exp_h(h):
    return -1.0 + 2.0 * np.exp(-h / 9.0)


def _bump_t(t):
    return -2.0 + 3.0 * np.exp(-((t - 15.0) ** 2) / 50.0)


def _valley_t(t):
    return _bump_t(t) - np.exp(-((t - 15.0) ** 2))


@dataclass(frozen=True)
class PopulationModel:
    name: str
    delta_h: Callable[[np.ndarray], np.ndarray]
    sigma2: float = 0.0
    delta_t: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def is_trend(self) -> bool:
        return self.delta_t is not None


POPULATION_MODELS: Dict[str, PopulationModel] = {
    m.name: m
    for m in [
        PopulationModel("NULL", lambda h: np.zeros_like(h)),
        PopulationModel("XRE", lambda h: np.zeros_like(h), SIGMA2_SIM),
        PopulationModel("LIN0", lambda h: -2.0 + 0.2 * h),
        PopulationModel("LIN1", lambda h: -2.0 + 0.2 * h, SIGMA2_SIM),
        PopulationModel("QUAD0", lambda h: 1.0 - 0.25 * h + 0.01 * h**2),
        PopulationModel("QUAD1", lambda h: 1.0 - 0.25 * h + 0.01 * h**2, SIGMA2_SIM),
        PopulationModel("EXP0", _exp_h),
        PopulationModel("EXP1", _exp_h, SIGMA2_SIM),
        PopulationModel("F1", _exp_h, 0.0, _bump_t),
        PopulationModel("F2", _exp_h, SIGMA2_SIM, _bump_t),
        PopulationModel("F3", _exp_h, 0.0, _valley_t),
        PopulationModel("F4", _exp_h, SIGMA2_SIM, _valley_t),
    ]
}
PREVALENCE_MODELS = ("NULL", "XRE", "LIN0", "LIN1", "QUAD0", "QUAD1", "EXP0", "EXP1")
TREND_MODELS = ("F1", "F2", "F3", "F4")
PREVALENCE_ESTIMATORS = ("psm", "unw", "trim", "xre", "xre-greg", "lin", "lin-greg", "npar", "npar-greg")
TREND_ESTIMATORS = ("psm", "unw", "trim", "npar", "npar-greg")


def get_model(name: str) -> PopulationModel:
    key = name.upper().replace("_", "").replace("₀", "0").replace("₁", "1")
    if key not in POPULATION_MODELS:
        raise KeyError(f"unknown population model {name!r}")
    return POPULATION_MODELS[key]


def population_sizes(size_id: str) -> np.ndarray:
    return TABLE1[_pop_key(size_id)].astype(float)


def sample_sizes(size_id: str, sample_id) -> np.ndarray:
    pop = _pop_key(size_id)
    if isinstance(sample_id, (int, np.integer)):
        for row in ("n1", "n2"):
            if TABLE1_TOTALS[f"{pop}/{row}"] == sample_id:
                return TABLE1[f"{pop}/{row}"].astype(float)
        raise KeyError(f"no benchmark design with n={sample_id} for {pop}")
    key = f"{pop}/{str(sample_id).lower()}"
    if key not in TABLE1:
        raise KeyError(f"unknown sample size id {sample_id!r}")
    return TABLE1[key].astype(float)


def _pop_key(size_id) -> str:
    if isinstance(size_id, (int, np.integer)):
        for key in ("N1", "N2"):
            if TABLE1_TOTALS[key] == size_id or size_id in (1, 2) and key == f"N{size_id}":
                return key
        raise KeyError(f"unknown population size {size_id!r}")
    key = str(size_id).upper()
    if key not in ("N1", "N2"):
        raise KeyError(f"unknown population size {size_id!r}")
    return key


@dataclass(frozen=True)
class Population:
    """A realised finite population; ``truth`` is its mean (per time point for trend models)."""

    model: str
    N: np.ndarray
    prob: np.ndarray
    positives: np.ndarray

    @property
    def truth(self):
        tot = self.positives.sum(axis=-1) / self.N.sum(axis=-1)
        return tot if self.N.ndim == 2 else float(tot)

    @property
    def margins(self) -> PopulationMargins:
        return PopulationMargins(self.N)


def gen_population(model, size_id, rng: np.random.Generator, T: int = T_SIM) -> Population:
    """Stratum effects ``delta_h + sigma * eps_h``; positives are binomial per stratum (per cell)."""
    model = get_model(model) if isinstance(model, str) else model
    h = np.arange(1, H_SIM + 1, dtype=float)
    delta = model.delta_h(h)
    if model.sigma2 > 0:
        delta = delta + np.sqrt(model.sigma2) * rng.standard_normal(H_SIM)
    N_h = population_sizes(size_id)
    if model.is_trend:
        t = np.arange(1, T + 1, dtype=float)
        eta = model.delta_t(t)[:, None] + delta[None, :]
        N = np.tile(N_h, (T, 1))
    else:
        eta = delta
        N = N_h
    prob = 1.0 / (1.0 + np.exp(-eta))
    positives = rng.binomial(N.astype(np.int64), prob)
    return Population(model.name, N, prob, positives)


def draw_sample(pop: Population, n_h, rng: np.random.Generator) -> StratumSummary:
    """Stratified SRS without replacement with per-stratum sizes ``n_h`` (repeated over time)."""
    n = np.broadcast_to(np.asarray(n_h, dtype=float), pop.N.shape)
    if np.any(n > pop.N):
        raise OversampledStratum("sample size exceeds population size in some stratum")
    N = pop.N.astype(np.int64)
    s = rng.hypergeometric(pop.positives, N - pop.positives, n.astype(np.int64))
    return StratumSummary(n.copy(), s.astype(float))


def mse_decompose(estimates: Sequence[Sequence[float]], truths: Sequence[float]) -> Tuple[float, float, float]:
    """Average over populations of (bias, variance, bias^2 + variance); variance uses the 1/S divisor."""
    biases, variances, mses = [], [], []
    for est, truth in zip(estimates, truths):
        est = np.asarray(est, dtype=float)
        est = est[np.isfinite(est)]
        if est.size < 2:
            raise InsufficientReplicates("need at least two estimates per population")
        bias = est.mean() - truth
        var = est.var()
        biases.append(bias)
        variances.append(var)
        mses.append(var + bias**2)
    return float(np.mean(biases)), float(np.mean(variances)), float(np.mean(mses))


# ---------------------------------------------------------------- scenarios

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["model", "population_size", "sample_size", "populations", "samples_per_population", "estimators", "seed"],
    "additionalProperties": False,
    "properties": {
        "model": {"type": "string", "enum": list(POPULATION_MODELS)},
        "population_size": {"oneOf": [{"type": "string", "enum": ["N1", "N2"]}, {"type": "integer", "enum": [6000000, 150000]}]},
        "sample_size": {"oneOf": [{"type": "string", "enum": ["n1", "n2"]}, {"type": "integer", "enum": [25000, 5000, 2500, 500]}]},
        "populations": {"type": "integer", "minimum": 1},
        "samples_per_population": {"type": "integer", "minimum": 2},
        "estimators": {"type": "array", "minItems": 1, "items": {"type": "string", "pattern": r"^[a-z\-]+(:[a-z\-]+)?$"}},
        "w0": {"type": "number", "exclusiveMinimum": 0},
        "B": {"type": "integer", "minimum": 1},
        "G": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer", "minimum": 0},
        "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "knots": {"type": "integer", "minimum": 1},
        "time_points": {"type": "integer", "minimum": 2},
        "time_knots": {"type": "integer", "minimum": 0},
        "ci_scale": {"type": "string", "enum": ["logit", "identity"]},
    },
}

DEFAULT_VARIANCE = {"psm": "closed-form", "unw": "closed-form", "trim": "closed-form"}
VARIANCE_CHOICES = {
    "design": ("closed-form", "none"),
    "model": ("analytical", "bootstrap", "none"),
    "greg": ("jackknife", "none"),
}


def _estimator_kind(name: str) -> str:
    if name in ("psm", "unw", "trim"):
        return "design"
    if name in ("xre", "lin", "npar"):
        return "model"
    if name in ("xre-greg", "lin-greg", "npar-greg"):
        return "greg"
    raise ValueError(name)


def parse_estimator(entry: str) -> Tuple[str, str]:
    """``"npar:bootstrap"`` -> ``("npar", "bootstrap")``; the variance method defaults by kind."""
    name, _, var = entry.partition(":")
    kind = _estimator_kind(name)
    var = var or {"design": "closed-form", "model": "analytical", "greg": "jackknife"}[kind]
    if var not in VARIANCE_CHOICES[kind]:
        raise ValueError(f"variance {var!r} not available for {name}")
    return name, var


@dataclass(frozen=True)
class ScenarioConfig:
    model: str
    population_size: str = "N2"
    sample_size: str = "n1"
    populations: int = 25
    samples_per_population: int = 10
    estimators: Tuple[str, ...] = PREVALENCE_ESTIMATORS
    w0: float = 3.0
    B: int = 250
    G: int = 250
    seed: int = 0
    level: float = 0.95
    knots: Optional[int] = None
    time_points: int = T_SIM
    time_knots: Optional[int] = None
    ci_scale: str = "logit"

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "model", get_model(self.model).name)
        for i, e in enumerate(self.estimators):
            try:
                parse_estimator(e)
            except ValueError as exc:
                raise ScenarioError(f"/estimators/{i}", f"invalid estimator {e!r}: {exc}") from None
        if self.is_trend:
            for i, e in enumerate(self.estimators):
                if parse_estimator(e)[0] not in ("psm", "unw", "trim", "xre", "lin", "npar", "xre-greg", "lin-greg", "npar-greg"):
                    raise ScenarioError(f"/estimators/{i}", f"{e!r} not available for trend scenarios")

    @property
    def is_trend(self) -> bool:
        return get_model(self.model).is_trend

    @property
    def is_large(self) -> bool:
        return _pop_key(self.population_size) == "N1"

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        validator = jsonschema.Draft7Validator(SCENARIO_SCHEMA)
        errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            pointer = "/" + "/".join(str(p) for p in err.absolute_path)
            raise ScenarioError(pointer, err.message)
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ScenarioError("", f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None}
        out["estimators"] = list(self.estimators)
        return out


@dataclass
class MetricsTable:
    """Aggregated metrics (one row per estimator, or per estimator and time point) and per-replicate records."""

    table: pd.DataFrame
    replicates: pd.DataFrame
    config: ScenarioConfig

    def to_csv(self, path=None) -> str:
        text = self.table.to_csv(index=False, float_format="%.10g", lineterminator="\n")
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def row(self, estimator: str, t: Optional[int] = None) -> pd.Series:
        df = self.table[self.table["estimator"] == estimator]
        if t is not None:
            df = df[df["t"] == t]
        if len(df) != 1:
            raise KeyError(estimator)
        return df.iloc[0]


def _seed_key(cfg: ScenarioConfig, p: int, s: int) -> List[int]:
    return [cfg.seed, p, s]


def _estimator_rng(cfg: ScenarioConfig, p: int, s: int, entry: str) -> np.random.Generator:
    # one stream per estimator, so adding or reordering estimators leaves the others unchanged
    return np.random.default_rng(np.random.SeedSequence(_seed_key(cfg, p, s) + [zlib.crc32(entry.encode())]))


def _run_estimators(cfg: ScenarioConfig, pop: Population, sample: StratumSummary, p: int, s: int):
    """Point, variance and CI for every configured estimator on one sample."""
    margins = pop.margins
    out = {}
    fits: Dict[str, object] = {}
    opts = PQLOptions()
    T = cfg.time_points if cfg.is_trend else None

    def model_fit(family):
        if family not in fits:
            spec = ModelSpec(family=family, knots=cfg.knots, trend=cfg.is_trend, time_knots=cfg.time_knots if cfg.time_knots is not None else T, w0=cfg.w0)
            try:
                fits[family] = fit_model(sample, spec, opts)
            except WsmoothError as exc:
                fits[family] = exc
        if isinstance(fits[family], Exception):
            raise fits[family]
        return fits[family]

    for entry in cfg.estimators:
        name, var_method = parse_estimator(entry)
        kind = _estimator_kind(name)
        rng = _estimator_rng(cfg, p, s, entry)
        try:
            if kind == "design":
                if T is None:
                    res = design_estimate(name, sample, margins, cfg.w0, cfg.level, cfg.ci_scale)
                    point, var = res.point, res.variance
                else:
                    rs = [design_estimate(name, sample.at_time(t), PopulationMargins(margins.counts[t - 1]), cfg.w0, cfg.level, cfg.ci_scale) for t in range(1, T + 1)]
                    point = np.array([r.point for r in rs])
                    var = np.array([r.variance for r in rs])
                if var_method == "none":
                    var = np.nan * np.asarray(var)
            elif kind == "model":
                fit = model_fit(name)
                if T is None:
                    point = ws_estimate(fit, sample, margins).point
                else:
                    point = trend_estimates(TrendFit(fit, sample), margins)
                if var_method == "analytical":
                    var = ws_variance_analytical(fit, sample, margins) if T is None else trend_variance_analytical(TrendFit(fit, sample), margins)
                elif var_method == "bootstrap":
                    bseed = int(rng.integers(2**63))
                    var = bootstrap_variance(fit, sample, margins, BootstrapConfig(B=cfg.B, seed=bseed), opts)
                else:
                    var = np.nan * np.asarray(point)
            else:
                family = name.split("-")[0]
                fit = model_fit(family)
                if T is None:
                    pi = pseudo_inclusion(sample, margins, cfg.w0).pi
                else:
                    pi = np.stack([p.pi for p in trend_pseudo_inclusion(sample, margins, cfg.w0)])
                point = greg_mean(sample.n, sample.s, margins.counts, fit.mu_table(), pi)
                if var_method == "jackknife":
                    units = disaggregate(sample, rng)
                    N = margins.counts

                    def jk_estimator(red, fit=fit, pi=pi):
                        f = refit(fit, red, opts)
                        return greg_mean(red.n, red.s, N, f.mu_table(), pi)

                    var = jackknife_variance(jk_estimator, units, cfg.G, H_SIM, T, rng=rng)
                else:
                    var = np.nan * np.asarray(point)
            point = np.atleast_1d(np.asarray(point, dtype=float))
            var = np.atleast_1d(np.asarray(var, dtype=float))
            lo = np.full_like(point, np.nan)
            hi = np.full_like(point, np.nan)
            for i in range(point.size):
                if np.isfinite(var[i]):
                    lo[i], hi[i] = confidence_interval(point[i], var[i], cfg.level, cfg.ci_scale)
            out[entry] = (point, var, lo, hi, None)
        except WsmoothError as exc:
            size = T or 1
            nan = np.full(size, np.nan)
            out[entry] = (nan, nan, nan, nan, type(exc).__name__)
    return out


def run_replicate(cfg: ScenarioConfig, p: int, s: int):
    """One (population, sample) replicate; fully determined by ``(seed, p, s)``."""
    pop = gen_population(cfg.model, cfg.population_size, np.random.default_rng(np.random.SeedSequence([cfg.seed, p])), T=cfg.time_points)
    rng = np.random.default_rng(np.random.SeedSequence(_seed_key(cfg, p, s)))
    sample = draw_sample(pop, sample_sizes(cfg.population_size, cfg.sample_size), rng)
    results = _run_estimators(cfg, pop, sample, p, s)
    return p, s, np.atleast_1d(pop.truth), results


def run_scenario(cfg: ScenarioConfig, n_jobs: int = 1, verbose: int = 0) -> MetricsTable:
    """Every estimator on every replicate, then metrics averaged over populations."""
    jobs = [(p, s) for p in range(cfg.populations) for s in range(cfg.samples_per_population)]
    outputs = Parallel(n_jobs=n_jobs, verbose=verbose)(delayed(run_replicate)(cfg, p, s) for p, s in jobs)
    outputs.sort(key=lambda o: (o[0], o[1]))

    records = []
    for p, s, truth, results in outputs:
        for entry, (point, var, lo, hi, err) in results.items():
            for i in range(point.size):
                records.append(
                    {
                        "estimator": entry,
                        "population": p,
                        "sample": s,
                        "seed": "-".join(str(k) for k in _seed_key(cfg, p, s)),
                        "t": i + 1,
                        "truth": truth[i],
                        "estimate": point[i],
                        "variance": var[i],
                        "lo": lo[i],
                        "hi": hi[i],
                        "error": err or "",
                    }
                )
    reps = pd.DataFrame.from_records(records)
    rows = []
    T = cfg.time_points if cfg.is_trend else 1
    for entry in cfg.estimators:
        name, var_method = parse_estimator(entry)
        sub = reps[reps["estimator"] == entry]
        for t in range(1, T + 1):
            st = sub[sub["t"] == t]
            rows.append(_metrics_row(entry, name, var_method, t if cfg.is_trend else None, st))
    table = pd.DataFrame(rows)
    if not cfg.is_trend:
        table = table.drop(columns="t")
    return MetricsTable(table, reps, cfg)


def _metrics_row(entry, name, var_method, t, st: pd.DataFrame) -> dict:
    ok = st[np.isfinite(st["estimate"])]
    groups = [(g["estimate"].to_numpy(), g["truth"].iloc[0]) for _, g in ok.groupby("population") if len(g) >= 2]
    if groups:
        bias, variance, mse = mse_decompose([g[0] for g in groups], [g[1] for g in groups])
    else:
        bias = variance = mse = np.nan
    with_ci = ok[np.isfinite(ok["lo"])]
    if len(with_ci):
        covered = (with_ci["lo"] <= with_ci["truth"]) & (with_ci["truth"] <= with_ci["hi"])
        coverage = float(covered.mean())
        length = float((with_ci["hi"] - with_ci["lo"]).mean())
    else:
        coverage = length = np.nan
    return {
        "estimator": entry,
        "variance_method": var_method,
        "t": t,
        "bias": bias,
        "variance": variance,
        "mse": mse,
        "coverage": coverage,
        "ci_length": length,
        "n_ok": int(len(ok)),
        "n_failed": int(len(st) - len(ok)),
    }
