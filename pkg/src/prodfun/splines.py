"""B-spline bases, difference penalties, and the monotone-increasing
reparameterization used by the shape-constrained smooth.

The basis uses an open (clamped) knot vector: boundary knots replicated to
full multiplicity, interior knots evenly spaced over [a, b] of the training
sample. With q basis functions of order `order` (order = polynomial degree
plus one; 4 = cubic) the knot vector has q + order entries. Evaluation points
outside [a, b] are clamped to the nearest boundary, which keeps the smooth
defined and monotone everywhere even when later iterations move the
covariate's range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline


@dataclass(frozen=True)
class BSplineBasis:
    knots: np.ndarray   # length q + order, nondecreasing
    order: int          # degree + 1; cubic = 4
    q: int              # number of basis functions

    @property
    def a(self) -> float:
        return float(self.knots[self.order - 1])

    @property
    def b(self) -> float:
        return float(self.knots[self.q])

    def design(self, x: np.ndarray) -> np.ndarray:
        """Dense n-by-q design matrix of basis values at x (clamped)."""
        x = np.clip(np.asarray(x, dtype=float), self.a, self.b)
        mat = BSpline.design_matrix(x, self.knots, self.order - 1,
                                    extrapolate=False)
        return mat.toarray()


def build_basis(x_sample: np.ndarray, q: int = 20, order: int = 4) -> BSplineBasis:
    """Evenly spaced knots over [min(x), max(x)] with replicated boundaries."""
    if order < 3:
        raise ValueError("order must be >= 3 (quadratic or higher)")
    if q < order:
        raise ValueError("need q >= order basis functions")
    x_sample = np.asarray(x_sample, dtype=float)
    a, b = float(np.min(x_sample)), float(np.max(x_sample))
    if not (b > a):
        raise ValueError("degenerate sample: all x equal")
    n_interior = q - order
    interior = a + (b - a) * np.arange(1, n_interior + 1) / (n_interior + 1)
    knots = np.concatenate([np.full(order, a), interior, np.full(order, b)])
    return BSplineBasis(knots=knots, order=order, q=q)


_CLAMP = 30.0


def monotone_map(gamma_raw: np.ndarray) -> np.ndarray:
    """Map unconstrained parameters to strictly increasing coefficients:
    gamma_1 = raw_1, gamma_j = gamma_{j-1} + exp(raw_j). The exp arguments
    are clamped to [-30, 30] to guard against overflow."""
    gamma_raw = np.asarray(gamma_raw, dtype=float)
    steps = np.exp(np.clip(gamma_raw[1:], -_CLAMP, _CLAMP))
    out = np.empty_like(gamma_raw)
    out[0] = gamma_raw[0]
    out[1:] = gamma_raw[0] + np.cumsum(steps)
    return out


def difference_matrix(q: int) -> np.ndarray:
    """(q-1)-by-q first-difference matrix D with (D @ g)_j = g_{j+1} - g_j."""
    d = np.zeros((q - 1, q))
    idx = np.arange(q - 1)
    d[idx, idx] = -1.0
    d[idx, idx + 1] = 1.0
    return d


def penalty(gamma: np.ndarray, lam: float) -> float:
    """Wiggliness penalty lambda * ||D gamma||^2 on constrained coefficients."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    diffs = np.diff(np.asarray(gamma, dtype=float))
    return float(lam * np.dot(diffs, diffs))


@dataclass
class MonotoneSmooth:
    """A fitted monotone smooth: basis plus unconstrained coefficients."""

    gamma_raw: np.ndarray
    lam: float
    basis: BSplineBasis

    @property
    def gamma(self) -> np.ndarray:
        return monotone_map(self.gamma_raw)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.basis.design(x) @ self.gamma
