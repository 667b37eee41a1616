"""Low-rank spline bases for the nonparametric stratum and time functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularPenalty, TooManyKnots


@dataclass(frozen=True)
class BasisMatrices:
    Xpoly: np.ndarray
    Zspline: np.ndarray
    knots: np.ndarray


def place_knots(values, count: int) -> np.ndarray:
    """Knots at every distinct value, or at ``count`` equally spaced quantiles of them."""
    uniq = np.unique(np.asarray(values, dtype=float))
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > uniq.size:
        raise TooManyKnots(f"{count} knots requested for {uniq.size} distinct values")
    if count == uniq.size:
        return uniq
    if count == 1:
        return np.quantile(uniq, [0.5])
    return np.quantile(uniq, np.linspace(0.0, 1.0, count))


def signed_sqrt(omega: np.ndarray, rtol: float = 1e-10):
    """Symmetric square root of a symmetric (possibly indefinite) matrix and its inverse.

    ``omega = Q diag(lam) Q^T`` gives ``Q diag(sign(lam) sqrt|lam|) Q^T``. The
    cubic radial penalty is only conditionally positive definite, so negative
    eigenvalues are expected.
    """
    lam, Q = np.linalg.eigh(omega)
    scale = np.abs(lam).max() if lam.size else 0.0
    if scale == 0.0 or np.any(np.abs(lam) < rtol * scale):
        raise SingularPenalty("knot penalty matrix is numerically singular")
    root = np.sign(lam) * np.sqrt(np.abs(lam))
    return (Q * root) @ Q.T, (Q / root) @ Q.T


def thin_plate_basis(x, knots) -> BasisMatrices:
    """Cubic radial (1-d low-rank thin plate) basis with i.i.d. coefficient reparameterisation."""
    x = np.asarray(x, dtype=float)
    knots = np.asarray(knots, dtype=float)
    if np.unique(knots).size != knots.size:
        raise SingularPenalty("knots must be distinct")
    R = np.abs(x[:, None] - knots[None, :]) ** 3
    if knots.size == 1:
        # scalar penalty |k - k|^3 = 0 carries no scale; use the raw column
        Z = R.copy()
    else:
        omega = np.abs(knots[:, None] - knots[None, :]) ** 3
        _, inv_root = signed_sqrt(omega)
        Z = R @ inv_root
    Xpoly = np.column_stack([np.ones_like(x), x])
    return BasisMatrices(Xpoly, Z, knots)


def truncated_linear_basis(x, knots) -> BasisMatrices:
    x = np.asarray(x, dtype=float)
    knots = np.asarray(knots, dtype=float)
    if np.unique(knots).size != knots.size:
        raise ValueError("knots must be distinct")
    Z = np.maximum(x[:, None] - knots[None, :], 0.0)
    return BasisMatrices(np.column_stack([np.ones_like(x), x]), Z, knots)
