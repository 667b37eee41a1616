"""Command-line front end: ``wsmooth estimate | trend | simulate``.

Data goes to files under ``--out``; diagnostics and error JSON go to stderr.
Exit status is 0 on success, 2 on any package error (bad input, failed
precondition such as every weight being trimmed) and 1 on anything else.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .data import PopulationMargins, aggregate, load_margins, load_sample
from .design import EstimateResult, design_estimate
from .errors import DimensionMismatch, InvalidSpec, MissingColumn, ScenarioError, WsmoothError
from .glmm import BASES, ModelSpec, fit_model, refit
from .resampling import BootstrapConfig, bootstrap_variance, jackknife_variance
from .simulation import ScenarioConfig, run_scenario
from .smoothing import greg_mean, pseudo_inclusion, ws_estimate, ws_greg_estimate, ws_variance_analytical
from .trend import (
    fit_trend_model,
    trend_estimates,
    trend_greg_estimates,
    trend_pseudo_inclusion,
    trend_variance_analytical,
)

log = logging.getLogger("wsmooth")

DESIGN_MODELS = ("unw", "psm", "trim")
GLMM_MODELS = ("xre", "lin", "npar")
ESTIMATE_CSV_HEADER = ["estimator", "variance_method", "point", "variance", "se", "ci_lower", "ci_upper", "level"]
TREND_CSV_HEADER = ["t"] + ESTIMATE_CSV_HEADER


def _resolve_variance(model: str, greg: bool, variance: Optional[str]) -> str:
    if greg and model not in GLMM_MODELS:
        raise InvalidSpec("--greg needs a model-based family (xre, lin or npar)")
    if model in DESIGN_MODELS:
        allowed, default = ("closed-form", "none"), "closed-form"
    elif greg:
        allowed, default = ("jackknife", "none"), "jackknife"
    else:
        allowed, default = ("analytical", "bootstrap", "none"), "analytical"
    variance = variance or default
    if variance not in allowed:
        name = f"{model}-greg" if greg else model
        raise InvalidSpec(f"variance method {variance!r} is not available for {name}; choose from {', '.join(allowed)}")
    return variance


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(args, command: str, seed, inputs: List[str], started: float) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "verbose", "threads")}
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": {str(p): _digest(p) for p in inputs},
        "timing": {
            "started_utc": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
            "elapsed_seconds": round(time.time() - started, 3),
        },
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return "" if v is None else v


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args) -> int:
    if args.seed is None:
        args.seed = int(np.random.SeedSequence().entropy % (2**63))
        log.info("no --seed given; drew %d", args.seed)
    return args.seed


def _threads(args) -> int:
    return args.threads or os.cpu_count() or 1


def _spec(args, trend: bool = False) -> ModelSpec:
    return ModelSpec(
        family=args.model,
        basis=args.basis,
        knots=args.knots,
        trend=trend,
        time_knots=getattr(args, "time_knots", None),
    )


def _row(res: EstimateResult, level: float):
    lo, hi = res.ci if res.ci is not None else (None, None)
    var = res.variance
    return [res.method, res.variance_method or "none", res.point, var, res.se, lo, hi, level]


def _result_dict(res: EstimateResult, level: float) -> dict:
    return {
        "estimator": res.method,
        "point": res.point,
        "variance": res.variance,
        "se": res.se,
        "ci": list(res.ci) if res.ci is not None else None,
        "level": level,
        "variance_method": res.variance_method or "none",
    }


def _glmm_diagnostics(fit) -> dict:
    return {
        "sigma2": {k: float(v) for k, v in sorted(fit.sigma2.items())},
        "converged": bool(fit.converged),
        "iterations": int(fit.n_iter),
        "beta": [float(b) for b in fit.beta],
    }


# ------------------------------------------------------------------ estimate


def cmd_estimate(args) -> int:
    started = time.time()
    variance = _resolve_variance(args.model, args.greg, args.variance)
    seed = _seed(args)
    margins = load_margins(args.margins)
    if margins.counts.ndim != 1:
        raise DimensionMismatch("estimate takes margins without a time column; use the trend command")
    sample = load_sample(args.sample, labels=margins.labels)
    summary = aggregate(sample, margins.H)
    n_jobs = _threads(args)
    diagnostics = {}

    if args.model in DESIGN_MODELS:
        res = design_estimate(args.model, summary, margins, args.w0, args.level, args.ci_scale)
        if variance == "none":
            res = EstimateResult(res.point, res.method)
    else:
        fit = fit_model(summary, _spec(args))
        diagnostics = _glmm_diagnostics(fit)
        if args.greg:
            pi = pseudo_inclusion(summary, margins, args.w0)
            diagnostics["gamma"] = pi.gamma
            res = ws_greg_estimate(fit, summary, margins, pi)
            var = None
            if variance == "jackknife":
                N = margins.counts

                def estimator(red, fit=fit, pi=pi.pi):
                    return greg_mean(red.n, red.s, N, refit(fit, red).mu_table(), pi)

                var = jackknife_variance(estimator, sample, args.G, margins.H, rng=np.random.default_rng(seed), n_jobs=n_jobs)
        else:
            res = ws_estimate(fit, summary, margins)
            var = None
            if variance == "analytical":
                var = ws_variance_analytical(fit, summary, margins)
            elif variance == "bootstrap":
                var = bootstrap_variance(fit, summary, margins, BootstrapConfig(B=args.B, seed=seed, n_jobs=n_jobs))
        if var is not None:
            res = res.with_variance(float(var), variance, args.level, args.ci_scale)

    out = _out_dir(args)
    manifest = _manifest(args, "estimate", seed, [args.sample, args.margins], started)
    payload = {"result": _result_dict(res, args.level), "diagnostics": diagnostics}
    _write_json(out / "estimate.json", payload)
    _write_csv(out / "estimate.csv", ESTIMATE_CSV_HEADER, [_row(res, args.level)])
    _write_json(out / "manifest.json", manifest)
    return 0


# --------------------------------------------------------------------- trend


def _trend_margins(margins: PopulationMargins, T: int) -> PopulationMargins:
    if margins.counts.ndim == 1:
        return PopulationMargins(np.tile(margins.counts, (T, 1)), labels=margins.labels)
    if margins.counts.shape[0] != T:
        raise DimensionMismatch(f"margins cover {margins.counts.shape[0]} time points, sample has {T}")
    return margins


def cmd_trend(args) -> int:
    started = time.time()
    variance = _resolve_variance(args.model, args.greg, args.variance)
    seed = _seed(args)
    margins = load_margins(args.margins)
    sample = load_sample(args.sample, labels=margins.labels)
    if not sample.has_time:
        raise MissingColumn("t")
    T = int(sample.t.max()) if margins.counts.ndim == 1 else margins.counts.shape[0]
    margins = _trend_margins(margins, T)
    summary = aggregate(sample, margins.H, T)
    n_jobs = _threads(args)
    diagnostics = {}

    if args.model in DESIGN_MODELS:
        results = []
        for t in range(1, T + 1):
            mt = PopulationMargins(margins.counts[t - 1])
            res = design_estimate(args.model, summary.at_time(t), mt, args.w0, args.level, args.ci_scale)
            results.append(res if variance != "none" else EstimateResult(res.point, res.method))
    else:
        tfit = fit_trend_model(summary, _spec(args, trend=True))
        diagnostics = _glmm_diagnostics(tfit.glmm)
        var = None
        if args.greg:
            pis = trend_pseudo_inclusion(summary, margins, args.w0)
            points = trend_greg_estimates(tfit, margins, pis)
            name = f"{args.model}-greg"
            if variance == "jackknife":
                N = margins.counts
                pi = np.stack([p.pi for p in pis])

                def estimator(red, fit=tfit.glmm, pi=pi):
                    return greg_mean(red.n, red.s, N, refit(fit, red).mu_table(), pi)

                var = jackknife_variance(estimator, sample, args.G, margins.H, T, rng=np.random.default_rng(seed), n_jobs=n_jobs)
        else:
            points = trend_estimates(tfit, margins)
            name = args.model
            if variance == "analytical":
                var = trend_variance_analytical(tfit, margins)
            elif variance == "bootstrap":
                var = bootstrap_variance(tfit.glmm, summary, margins, BootstrapConfig(B=args.B, seed=seed, n_jobs=n_jobs))
        results = []
        for i, p in enumerate(points):
            res = EstimateResult(float(p), name)
            if var is not None:
                res = res.with_variance(float(var[i]), variance, args.level, args.ci_scale)
            results.append(res)

    out = _out_dir(args)
    manifest = _manifest(args, "trend", seed, [args.sample, args.margins], started)
    payload = {
        "results": [dict(_result_dict(r, args.level), t=t) for t, r in enumerate(results, start=1)],
        "diagnostics": diagnostics,
    }
    _write_json(out / "trend.json", payload)
    _write_csv(out / "trend.csv", TREND_CSV_HEADER, [[t] + _row(r, args.level) for t, r in enumerate(results, start=1)])
    _write_json(out / "manifest.json", manifest)
    return 0


# ------------------------------------------------------------------ simulate


def bundled_scenarios() -> List[str]:
    return sorted(p.name for p in resources.files("wsmooth.scenarios").iterdir() if p.name.endswith(".json"))


def _scenario_path(name: str):
    path = Path(name)
    if path.exists():
        return path
    candidate = resources.files("wsmooth.scenarios") / name
    if candidate.is_file():
        return candidate
    raise ScenarioError("", f"scenario file not found: {name} (bundled: {', '.join(bundled_scenarios())})")


def cmd_simulate(args) -> int:
    started = time.time()
    path = _scenario_path(args.scenario)
    with resources.as_file(path) if not isinstance(path, Path) else _nullctx(path) as real:
        cfg = ScenarioConfig.from_json(real)
        inputs = [real]
        if cfg.is_large and not args.full:
            raise ScenarioError("/population_size", "large-population scenarios are gated; pass --full to run them")
        metrics = run_scenario(cfg, n_jobs=_threads(args))
        out = _out_dir(args)
        metrics.to_csv(out / "metrics.csv")
        metrics.replicates.to_csv(out / "replicates.csv", index=False, float_format="%.10g", lineterminator="\n")
        manifest = _manifest(args, "simulate", cfg.seed, inputs, started)
        manifest["config"]["scenario"] = cfg.to_dict()
        _write_json(out / "manifest.json", manifest)
    return 0


class _nullctx:
    def __init__(self, value):
        self.value = value

    def __enter__(self):
        return self.value

    def __exit__(self, *exc):
        return False


# -------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, trend: bool) -> None:
    p.add_argument("sample", help="unit-level CSV with columns stratum (or h), y" + (", t" if trend else "[, t]"))
    p.add_argument("margins", help="CSV with columns stratum, N" + ("[, t]" if trend else ""))
    p.add_argument("--model", required=True, choices=DESIGN_MODELS + GLMM_MODELS)
    p.add_argument("--greg", action="store_true", help="GREG-adjust a model-based estimator")
    p.add_argument("--w0", type=float, default=3.0, help="weight trimming cutoff (default 3)")
    p.add_argument("--variance", choices=("closed-form", "analytical", "bootstrap", "jackknife", "none"))
    p.add_argument("--B", type=int, default=250, help="bootstrap replicates (default 250)")
    p.add_argument("--G", type=int, default=250, help="jackknife groups (default 250)")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--ci-scale", choices=("logit", "identity"), default="logit")
    p.add_argument("--basis", choices=BASES, default="thin-plate")
    p.add_argument("--knots", type=int, default=None, help="stratum spline knots (default: one per stratum)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsmooth", description="Weight-smoothed prevalence and trend estimation for post-stratified surveys.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="overall prevalence from one sample")
    _common(est, trend=False)
    est.set_defaults(func=cmd_estimate)

    tr = sub.add_parser("trend", help="prevalence at each time point")
    _common(tr, trend=True)
    tr.add_argument("--time-knots", type=int, default=None, help="time spline knots (default min(20, T); 0 drops the time function)")
    tr.set_defaults(func=cmd_trend)

    sim = sub.add_parser("simulate", help="run a simulation scenario file")
    sim.add_argument("scenario", help="scenario JSON path or bundled scenario name")
    sim.add_argument("--full", action="store_true", help="allow the 6,000,000-unit population scenarios")
    sim.add_argument("--threads", type=int, default=None)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except WsmoothError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort report in machine-readable form
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
