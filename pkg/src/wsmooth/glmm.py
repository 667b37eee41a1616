"""Weight-smoothing GLMM: design construction and PQL / pseudo-REML fitting.

The binomial outcome enters only through stratum (or stratum-time cell)
totals, which are sufficient statistics for the Bernoulli likelihood. Each
outer iteration linearises the logit model into a working linear mixed model
with pseudo-response ``eta + (ybar - mu) / (mu (1 - mu))`` and weights
``n mu (1 - mu)``; variance components of the working model are estimated by
REML, solved in mixed-model-equation space with random effects scaled to unit
variance (``b = lam * u``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotri
from scipy.special import expit, logit

from .data import StratumSummary
from .errors import DimensionMismatch, EmptyStratum, InvalidSpec, NotConverged, NumericalBreakdown
from .splines import place_knots, thin_plate_basis, truncated_linear_basis

log = logging.getLogger(__name__)

FAMILIES = ("xre", "lin", "npar")
BASES = ("thin-plate", "truncated-linear")


@dataclass(frozen=True)
class ModelSpec:
    """Weight-smoothing model choice.

    ``knots`` defaults to one knot per stratum; ``time_knots`` defaults to
    ``min(20, T)`` and ``0`` drops the time function entirely.
    """

    family: str = "npar"
    basis: str = "thin-plate"
    knots: Optional[int] = None
    trend: bool = False
    time_knots: Optional[int] = None
    w0: float = 3.0

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in FAMILIES:
            raise InvalidSpec(f"unknown family {self.family!r}")
        if self.basis not in BASES:
            raise InvalidSpec(f"unknown basis {self.basis!r}")
        if self.w0 <= 0:
            raise InvalidSpec("w0 must be positive")
        object.__setattr__(self, "family", fam)


@dataclass(frozen=True)
class DesignMatrices:
    """Cell-level fixed and random designs.

    Cells are strata, or (time, stratum) pairs in time-major order. The
    unit-to-stratum expansion is never formed: each cell carries its sample
    count instead.
    """

    X: np.ndarray
    Z: np.ndarray
    components: Tuple[Tuple[str, int, int], ...]
    H: int
    T: Optional[int] = None

    @property
    def n_cells(self) -> int:
        return self.X.shape[0]

    @property
    def component_names(self) -> Tuple[str, ...]:
        return tuple(c[0] for c in self.components)

    def block(self, name: str) -> slice:
        for cname, start, stop in self.components:
            if cname == name:
                return slice(start, stop)
        raise KeyError(name)


@dataclass(frozen=True)
class PQLOptions:
    tol: float = 1e-8
    max_iter: int = 100
    reml_tol: float = 1e-8
    reml_max_iter: int = 100
    fixed_variances: Mapping[str, float] = field(default_factory=dict)
    start_variance: float = 0.1


@dataclass(frozen=True)
class FittedGlmm:
    """Converged (or last) PQL iterate.

    ``cov`` is the inverse of the scaled mixed-model coefficient matrix, i.e.
    the prediction-error covariance of ``(beta, u)`` under the working model.
    """

    spec: ModelSpec
    design: DesignMatrices
    beta: np.ndarray
    b: np.ndarray
    sigma2: Dict[str, float]
    eta: np.ndarray
    weights: np.ndarray
    cov: np.ndarray
    converged: bool
    n_iter: int

    @property
    def mu(self) -> np.ndarray:
        return expit(self.eta)

    @property
    def lam(self) -> np.ndarray:
        return _lam_vector(self.design, self.sigma2)

    def mu_table(self) -> np.ndarray:
        """Fitted means shaped like the summary: ``(H,)`` or ``(T, H)``."""
        mu = self.mu
        return mu.reshape(self.design.T, self.design.H) if self.design.T else mu

    def random_block(self, name: str) -> np.ndarray:
        return self.b[self.design.block(name)]


def _stratum_basis(spec: ModelSpec, x: np.ndarray):
    H = x.size
    k = spec.knots if spec.knots is not None else H
    if k > H:
        raise InvalidSpec(f"NPAR needs knots <= H ({k} > {H})")
    knots = place_knots(x, k)
    build = thin_plate_basis if spec.basis == "thin-plate" else truncated_linear_basis
    return build(x, knots)


def build_design(spec: ModelSpec, H: int, T: Optional[int] = None) -> DesignMatrices:
    """Fixed/random designs for XRE, LIN or NPAR, optionally with a smooth time function.

    The stratum covariate is the stratum index ``h``. With a trend, the time
    function contributes a centred linear slope to the fixed part and a
    thin-plate block of random coefficients; its intercept is shared with the
    global one.
    """
    if H < 1:
        raise InvalidSpec("H must be >= 1")
    if spec.family != "xre" and H < 2:
        raise InvalidSpec(f"{spec.family} requires H >= 2")
    if spec.trend and (T is None or T < 2):
        raise InvalidSpec("trend model requires T >= 2")
    x = np.arange(1, H + 1, dtype=float)

    cols_x = [np.ones(H)]
    z_blocks = []
    if spec.family in ("lin", "npar"):
        cols_x.append(x)
    if spec.family == "npar":
        z_blocks.append(("spline", _stratum_basis(spec, x).Zspline))
    z_blocks.append(("stratum", np.eye(H)))
    Xs = np.column_stack(cols_x)

    if not spec.trend:
        X, blocks = Xs, z_blocks
        T_out = None
    else:
        tk = spec.time_knots if spec.time_knots is not None else min(20, T)
        tvals = np.arange(1, T + 1, dtype=float)
        # expand stratum parts over time (time-major cells)
        X = np.tile(Xs, (T, 1))
        blocks = [(name, np.tile(Zb, (T, 1))) for name, Zb in z_blocks]
        if tk > 0:
            if tk > T:
                raise InvalidSpec(f"time knots {tk} > T={T}")
            knots = place_knots(tvals, tk)
            build = thin_plate_basis if spec.basis == "thin-plate" else truncated_linear_basis
            tb = build(tvals, knots)
            tc = np.repeat(tvals - tvals.mean(), H)
            X = np.column_stack([X, tc])
            blocks = [("time", np.repeat(tb.Zspline, H, axis=0))] + blocks
        T_out = T

    comps = []
    start = 0
    for name, Zb in blocks:
        comps.append((name, start, start + Zb.shape[1]))
        start += Zb.shape[1]
    Z = np.column_stack([Zb for _, Zb in blocks])
    return DesignMatrices(X=X, Z=Z, components=tuple(comps), H=H, T=T_out)


def _lam_vector(design: DesignMatrices, sigma2: Mapping[str, float]) -> np.ndarray:
    lam = np.empty(design.Z.shape[1])
    for name, start, stop in design.components:
        lam[start:stop] = np.sqrt(max(sigma2[name], 0.0))
    return lam


class _WorkingModel:
    """Cross-products of one linearised LMM and its REML criterion."""

    def __init__(self, X, Z, w, ystar, comp_of_col, n_comp):
        Xw = X * w[:, None]
        Zw = Z * w[:, None]
        self.p = X.shape[1]
        self.q = Z.shape[1]
        self.XtWX = X.T @ Xw
        self.XtWZ = Xw.T @ Z
        self.ZtWZ = Z.T @ Zw
        self.XtWy = Xw.T @ ystar
        self.ZtWy = Zw.T @ ystar
        self.X, self.Z, self.Zw, self.w, self.ystar = X, Z, Zw, w, ystar
        self.E = np.zeros((self.q, n_comp))
        self.E[np.arange(self.q), comp_of_col] = 1.0
        self.comp_of_col = comp_of_col

    def solve(self, sig2, derivs=True):
        lam = np.sqrt(np.maximum(sig2, 0.0))[self.comp_of_col]
        p, q = self.p, self.q
        XZl = self.XtWZ * lam
        C = np.empty((p + q, p + q))
        C[:p, :p] = self.XtWX
        C[:p, p:] = XZl
        C[p:, :p] = XZl.T
        C[p:, p:] = lam[:, None] * self.ZtWZ * lam
        C[p:, p:][np.diag_indices(q)] += 1.0
        L, info = dpotrf(C, lower=1)
        if info != 0:
            raise NumericalBreakdown("mixed-model equations are not positive definite")
        Cinv, info = dpotri(L, lower=1)
        if info != 0:
            raise NumericalBreakdown("mixed-model equations are singular")
        Cinv = np.tril(Cinv) + np.tril(Cinv, -1).T
        rhs = np.concatenate([self.XtWy, lam * self.ZtWy])
        sol = Cinv @ rhs
        # y'Py = r'Wr + u'u from the fitted residual r (no cancellation)
        u = sol[p:]
        r = self.ystar - self.X @ sol[:p] - self.Z @ (lam * u)
        f = 2.0 * np.log(L.diagonal()).sum() + (self.w * r) @ r + u @ u
        out = _Solution(f, sol, Cinv, lam)
        if derivs:
            F = np.vstack([self.XtWZ, lam[:, None] * self.ZtWZ])
            CF = Cinv @ F
            ZPZ = self.ZtWZ - F.T @ CF
            ZPy = self.Zw.T @ r
            # where the data dominate a column (lam^2 z'Wz >= 1) the difference
            # above cancels badly; use Lam Z'PZ = (C^-1 F)_u and Lam Z'Py = u instead
            big = lam**2 * self.ZtWZ.diagonal() >= 1.0
            if big.any():
                Q = np.zeros_like(ZPZ)
                Q[big] = CF[p:][big] / lam[big, None]
                both = big[:, None] & big[None, :]
                ZPZ = np.where(big[:, None], Q, np.where(big[None, :], Q.T, ZPZ))
                ZPZ = np.where(both, 0.5 * (Q + Q.T), ZPZ)
                ZPy = np.where(big, u / np.where(big, lam, 1.0), ZPy)
            E = self.E
            out.grad = E.T @ (ZPZ.diagonal() - ZPy**2)
            out.fisher = E.T @ (ZPZ**2) @ E
            # observed Hessian of -2 log L_R: -tr(PV_k PV_l) + 2 y'PV_k PV_l Py
            A = ZPy[:, None] * E
            out.hess = -out.fisher + 2.0 * (A.T @ ZPZ @ A)
        return out

    def reml(self, sig2, free, tol, max_iter):
        """Projected Newton on the variance components (``sig2 >= 0``).

        Uses the observed Hessian when it is positive definite on the free
        set and falls back to Fisher scoring otherwise; step halving keeps the
        criterion monotone.
        """
        sig2 = np.maximum(np.asarray(sig2, dtype=float), 0.0)
        cur = self.solve(sig2)
        for _ in range(max_iter):
            g = cur.grad
            active = free & ~((sig2 <= 0.0) & (g > 0.0))
            if not active.any():
                break
            ga = g[active]
            step_a = None
            for M in (cur.hess, cur.fisher):
                Ma = M[np.ix_(active, active)]
                try:
                    c, info = dpotrf(Ma, lower=1)
                except ValueError:
                    info = 1
                if info == 0:
                    step_a = -np.linalg.solve(Ma, ga)
                    break
            if step_a is None:
                step_a = -ga / max(np.abs(cur.fisher.diagonal()).max(), 1e-300)
            step = np.zeros_like(sig2)
            step[active] = step_a
            scale = tol * (1.0 + sig2.max())
            if np.abs(np.maximum(sig2 + step, 0.0) - sig2).max() <= scale:
                # converged: the criterion cannot resolve a step this small
                sig2 = np.maximum(sig2 + step, 0.0)
                cur = self.solve(sig2)
                break
            alpha = 1.0
            while True:
                trial = np.maximum(sig2 + alpha * step, 0.0)
                nxt = self.solve(trial)
                if nxt.f <= cur.f + 1e-10 * abs(cur.f):
                    break
                alpha *= 0.5
                if alpha < 1e-4:
                    trial, nxt = sig2, cur
                    break
            change = np.abs(trial - sig2).max()
            sig2, cur = trial, nxt
            if change <= scale:
                break
        return sig2, cur


class _Solution:
    __slots__ = ("f", "sol", "cov", "lam", "grad", "fisher", "hess")

    def __init__(self, f, sol, cov, lam):
        self.f = f
        self.sol = sol
        self.cov = cov
        self.lam = lam
        self.grad = self.fisher = self.hess = None


def _check_summary(summary: StratumSummary, design: DesignMatrices, allow_empty: bool = False):
    shape = (design.T, design.H) if design.T else (design.H,)
    if summary.n.shape != shape:
        raise DimensionMismatch(f"summary shape {summary.n.shape} does not match design {shape}")
    if allow_empty:
        if summary.n.sum() <= 0:
            raise EmptyStratum(1)
        return
    pooled = summary.n if summary.n.ndim == 1 else summary.n.sum(axis=0)
    empty = np.flatnonzero(pooled <= 0)
    if empty.size:
        raise EmptyStratum(int(empty[0]) + 1)


def fit_pql(
    summary: StratumSummary,
    design: DesignMatrices,
    opts: Optional[PQLOptions] = None,
    spec: Optional[ModelSpec] = None,
    start: Optional[FittedGlmm] = None,
    allow_empty: bool = False,
) -> FittedGlmm:
    """Fit the GLMM by doubly iterative PQL with REML variance components.

    ``start`` warm-starts the linear predictor and variance components from a
    previous fit on the same design (used by resampling refits). With
    ``allow_empty`` a stratum without sampled units is allowed; it carries no
    weight and its mean is predicted from the rest of the model.
    """
    opts = opts or PQLOptions()
    spec = spec or (start.spec if start is not None else ModelSpec())
    _check_summary(summary, design, allow_empty)
    n = summary.n.ravel()
    s = summary.s.ravel()
    X, Z = design.X, design.Z
    names = design.component_names
    comp_of_col = np.empty(Z.shape[1], dtype=np.int64)
    for k, (_, a, b_) in enumerate(design.components):
        comp_of_col[a:b_] = k
    fixed = np.array([nm in opts.fixed_variances for nm in names])
    free = ~fixed

    if start is not None:
        eta = start.eta.copy()
        sig2 = np.array([start.sigma2[nm] for nm in names], dtype=float)
    else:
        eta = logit((s + 0.5) / (n + 1.0))
        sig2 = np.full(len(names), opts.start_variance)
    for k, nm in enumerate(names):
        if fixed[k]:
            sig2[k] = float(opts.fixed_variances[nm])

    with np.errstate(invalid="ignore", divide="ignore"):
        ybar = np.where(n > 0, s / np.where(n > 0, n, 1.0), 0.0)

    def linearise(eta_):
        mu = expit(eta_)
        v = np.maximum(mu * (1.0 - mu), 1e-12)
        w = n * v
        ystar = eta_ + np.where(n > 0, (ybar - mu) / v, 0.0)
        return w, ystar

    converged = False
    beta = start.beta.copy() if start is not None else None
    b = None
    it = 0
    for it in range(1, opts.max_iter + 1):
        w, ystar = linearise(eta)
        if beta is None:
            sw = np.sqrt(w)
            beta = np.linalg.lstsq(X * sw[:, None], ystar * sw, rcond=None)[0]
        # REML is invariant to shifting y* along X; centring on the current
        # fixed part keeps y'Py from being a difference of huge numbers
        offset = beta
        wm = _WorkingModel(X, Z, w, ystar - X @ offset, comp_of_col, len(names))
        if free.any():
            new_sig2, sol_ = wm.reml(sig2, free, opts.reml_tol, opts.reml_max_iter)
        else:
            new_sig2, sol_ = sig2, wm.solve(sig2, derivs=False)
        sol, lam = sol_.sol, sol_.lam
        p = X.shape[1]
        beta = sol[:p] + offset
        b = lam * sol[p:]
        new_eta = X @ beta + Z @ b
        if not np.all(np.isfinite(new_eta)):
            raise NumericalBreakdown("non-finite linear predictor")
        d_eta = np.abs(new_eta - eta).max() / (1.0 + np.abs(eta).max())
        d_sig = np.abs(new_sig2 - sig2).max() / (1.0 + sig2.max())
        eta, sig2 = new_eta, new_sig2
        if d_eta < opts.tol and d_sig < opts.tol:
            converged = True
            break

    # plug-in quantities at the final means
    w, ystar = linearise(eta)
    wm = _WorkingModel(X, Z, w, ystar, comp_of_col, len(names))
    cov = wm.solve(sig2, derivs=False).cov
    fit = FittedGlmm(
        spec=spec,
        design=design,
        beta=beta,
        b=b,
        sigma2={nm: float(sig2[k]) for k, nm in enumerate(names)},
        eta=eta,
        weights=w,
        cov=cov,
        converged=converged,
        n_iter=it,
    )
    if not converged:
        raise NotConverged(opts.max_iter, fit)
    return fit


def fit_model(
    summary: StratumSummary,
    spec: ModelSpec,
    opts: Optional[PQLOptions] = None,
    start: Optional[FittedGlmm] = None,
) -> FittedGlmm:
    """Build the design for ``spec`` and fit it."""
    if start is not None and start.spec == spec:
        design = start.design
    else:
        design = build_design(spec, summary.H, summary.T if spec.trend else None)
    return fit_pql(summary, design, opts, spec=spec, start=start)


def refit(fit: FittedGlmm, summary: StratumSummary, opts: Optional[PQLOptions] = None) -> FittedGlmm:
    """Refit the same model to new data, warm-started at ``fit``; one cold retry on failure.

    Strata emptied by resampling (a jackknife group holding a stratum's only
    unit) are allowed and predicted from the model.
    """
    try:
        return fit_pql(summary, fit.design, opts, spec=fit.spec, start=fit, allow_empty=True)
    except (NotConverged, NumericalBreakdown):
        opts = opts or PQLOptions()
        return fit_pql(summary, fit.design, replace(opts, max_iter=2 * opts.max_iter), spec=fit.spec, allow_empty=True)


def predict_strata(fit: FittedGlmm) -> np.ndarray:
    """Fitted stratum means ``expit(eta)``, shaped ``(H,)`` or ``(T, H)``."""
    return fit.mu_table()


def prediction_covariance(fit: FittedGlmm) -> np.ndarray:
    """Delta-method covariance of the fitted cell means.

    ``Delta C (C^T Sigma^{-1} C + B)^{-1} C^T Delta`` with ``Delta = diag(mu(1-mu))``,
    ``C = [X, Z]`` and ``Sigma`` the working residual covariance; computed in the
    unit-variance parameterisation of the random effects.
    """
    v = fit.mu * (1.0 - fit.mu)
    Cbar = np.hstack([fit.design.X, fit.design.Z * fit.lam])
    A = Cbar * v[:, None]
    theta = A @ fit.cov @ A.T
    theta = 0.5 * (theta + theta.T)
    if not np.all(np.isfinite(theta)):
        raise NumericalBreakdown("non-finite prediction covariance")
    return theta
