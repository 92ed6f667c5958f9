"""Shape-constrained additive-model fitting: y = X beta + Psi(z) + eps with
Psi monotone increasing, by penalized least squares.

The smooth Psi is a B-spline expansion whose coefficients pass through the
monotone reparameterization in `splines`. Because a constant in the smooth
cannot be separated from the intercept, the first constrained coefficient is
pinned to zero during optimization and the fitted smooth is re-centered
afterwards (sample mean absorbed into the intercept). Everything the BFGS
inner loop touches is precomputed in Gram form, so a single objective/gradient
evaluation costs O((p+q)^2) regardless of sample size.

Smoothing-parameter selection minimizes GCV(lambda) = n*SSE/(n-edf)^2 by
Newton-Raphson on log lambda with numeric second derivatives, falling back to
golden-section search on the bracket [1e-8, 1e8] when a Newton step leaves it
or the local curvature is not positive.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .splines import BSplineBasis, MonotoneSmooth, build_basis, difference_matrix

AUTO = "auto"

_LAM_LO, _LAM_HI = 1e-8, 1e8
_CLAMP = 30.0


@dataclass
class ScamFit:
    beta: np.ndarray
    smooth: MonotoneSmooth
    fitted_values: np.ndarray
    sse: float
    gcv: float
    edf: float
    lam: float
    converged: bool
    n_iter: int
    objective: float
    objective_trace: np.ndarray
    warm: tuple = field(default=None, repr=False)  # (log lam, theta) for reuse

    def predict_smooth(self, z: np.ndarray) -> np.ndarray:
        return self.smooth(z)


class _Problem:
    """Gram-form penalized least squares over theta = (beta, raw steps)."""

    def __init__(self, y, X, z, basis: BSplineBasis):
        self.n = len(y)
        self.p = X.shape[1]
        self.q = basis.q
        self.basis = basis
        self.B = basis.design(z)
        G = np.hstack([X, self.B[:, 1:]])          # gamma_1 pinned to 0
        self.C = G.T @ G
        self.g = G.T @ y
        self.yy = float(y @ y)
        D = difference_matrix(self.q)
        self.P11 = (D.T @ D)[1:, 1:]
        self.dim = self.p + self.q - 1
        # the optimizer sees the per-observation objective so that the pinned
        # gradient/objective-change thresholds are meaningful at any n
        self.scale = 1.0 / self.n

    def _unpack(self, theta):
        beta = theta[:self.p]
        raw = np.clip(theta[self.p:], -_CLAMP, _CLAMP)
        steps = np.exp(raw)
        gt = np.cumsum(steps)                      # gamma_2..gamma_q (gamma_1=0)
        inside = (theta[self.p:] > -_CLAMP) & (theta[self.p:] < _CLAMP)
        return beta, gt, steps * inside

    def value(self, theta, lam):
        beta, gt, _ = self._unpack(theta)
        u = np.concatenate([beta, gt])
        pen = lam * float(gt @ self.P11 @ gt)
        raw = self.yy - 2.0 * float(u @ self.g) + float(u @ self.C @ u) + pen
        return self.scale * raw

    def value_grad(self, theta, lam):
        beta, gt, dsteps = self._unpack(theta)
        u = np.concatenate([beta, gt])
        Cu = self.C @ u
        Pg = self.P11 @ gt
        f = self.yy - 2.0 * float(u @ self.g) + float(u @ Cu) + lam * float(gt @ Pg)
        grad_u = 2.0 * (Cu - self.g)
        grad_gt = grad_u[self.p:] + 2.0 * lam * Pg
        # chain rule through gamma_j = sum of steps up to j
        tail = np.cumsum(grad_gt[::-1])[::-1]
        grad = np.concatenate([grad_u[:self.p], dsteps * tail])
        return self.scale * f, self.scale * grad

    def sse_of(self, theta):
        beta, gt, _ = self._unpack(theta)
        u = np.concatenate([beta, gt])
        return self.yy - 2.0 * float(u @ self.g) + float(u @ self.C @ u)

    def edf_of(self, lam):
        S = np.zeros_like(self.C)
        S[self.p:, self.p:] = self.P11
        A = self.C + lam * S
        try:
            sol = np.linalg.solve(A, self.C)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(A, self.C, rcond=None)[0]
        return float(np.trace(sol))

    def gcv_of(self, theta, lam):
        sse = max(self.sse_of(theta), 0.0)
        edf = self.edf_of(lam)
        denom = self.n - edf
        if denom <= 0:
            return math.inf, edf, sse
        return self.n * sse / denom**2, edf, sse


def _run_bfgs(prob: _Problem, lam, theta0, gtol, maxiter):
    trace = [prob.value(theta0, lam)]
    res = minimize(
        prob.value_grad, theta0, args=(lam,), jac=True, method="BFGS",
        callback=lambda xk: trace.append(prob.value(xk, lam)),
        options={"gtol": gtol, "maxiter": maxiter},
    )
    grad_ok = float(np.max(np.abs(res.jac))) < gtol
    rel_change_ok = (
        len(trace) >= 2
        and abs(trace[-1] - trace[-2]) <= 1e-12 * max(1.0, abs(trace[-2]))
    )
    converged = bool(res.success or grad_ok or rel_change_ok)
    return res.x, np.asarray(trace), converged, res.nit


def _golden(fun, lo, hi, tol=1e-3, max_iter=80):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
    return (a + b) / 2.0


def fit_scam(y, X, z, lam=AUTO, *, q=20, order=4, warm=None,
             gtol=1e-8, maxiter=1000) -> ScamFit:
    """Fit y = X beta + Psi(z) + eps with Psi monotone increasing.

    X must carry a leading all-ones intercept column (the smooth's level is
    absorbed there). lam may be a nonnegative number or AUTO for GCV
    selection. `warm` accepts the .warm attribute of a previous fit on
    similar data to start both the coefficients and the lambda search.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float)
    n = len(y)
    if X.ndim != 2 or len(X) != n or len(z) != n:
        raise ValueError("y, X, z must have matching lengths")
    if not np.allclose(X[:, 0], 1.0):
        raise ValueError("X must have a leading intercept column")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("rank-deficient X")
    if n < q + X.shape[1] + 1:
        raise ValueError(f"need at least q + cols(X) + 1 = {q + X.shape[1] + 1} rows")

    span = float(np.max(z) - np.min(z))
    degenerate = span <= 1e-8 * max(1.0, float(np.abs(z).max()))
    if degenerate:
        warnings.warn("z is near-constant; forcing a large smoothing parameter")
        lam = _LAM_HI

    basis = build_basis(z, q=q, order=order)
    prob = _Problem(y, X, z, basis)

    # start: OLS for beta ignoring the smooth, unit steps for gamma
    if warm is not None and len(warm[1]) == prob.dim:
        theta0 = np.asarray(warm[1], dtype=float).copy()
    else:
        beta0 = np.linalg.lstsq(X, y, rcond=None)[0]
        theta0 = np.concatenate([beta0, np.zeros(prob.q - 1)])

    cache: dict[float, tuple] = {}
    state = {"theta": theta0}

    def eval_v(v):
        if v not in cache:
            theta, trace, conv, nit = _run_bfgs(prob, math.exp(v), state["theta"],
                                                gtol, maxiter)
            state["theta"] = theta
            gcv, edf, sse = prob.gcv_of(theta, math.exp(v))
            cache[v] = (gcv, theta, trace, conv, nit, edf, sse)
        return cache[v][0]

    if lam == AUTO:
        lo, hi = math.log(_LAM_LO), math.log(_LAM_HI)
        v = float(warm[0]) if warm is not None else 0.0
        v = min(max(v, lo), hi)
        h = 0.5
        for _ in range(25):
            f0, fp, fm = eval_v(v), eval_v(v + h), eval_v(v - h)
            g1 = (fp - fm) / (2.0 * h)
            g2 = (fp - 2.0 * f0 + fm) / h**2
            if not (math.isfinite(g1) and math.isfinite(g2)) or g2 <= 0:
                v = _golden(eval_v, lo, hi)
                break
            step = -g1 / g2
            if abs(step) > 6.0:
                step = math.copysign(6.0, step)
            v_new = v + step
            if v_new < lo or v_new > hi:
                v = _golden(eval_v, lo, hi)
                break
            v = v_new
            if abs(step) < 1e-3:
                break
        # use the best evaluated point (golden may end between grid evals)
        eval_v(v)
        v_star = min(cache, key=lambda key: cache[key][0])
        lam_val = math.exp(v_star)
    else:
        lam_val = float(lam)
        if lam_val < 0:
            raise ValueError("lambda must be >= 0")
        v_star = math.log(max(lam_val, 1e-300))
        eval_v(v_star)

    gcv, theta, trace, converged, nit, edf, sse = cache[v_star]

    # center the smooth and absorb its mean into the intercept
    beta = theta[:prob.p].copy()
    raw_steps = np.clip(theta[prob.p:], -_CLAMP, _CLAMP)
    gamma = np.concatenate([[0.0], np.cumsum(np.exp(raw_steps))])
    smooth_vals = prob.B @ gamma
    center = float(smooth_vals.mean())
    gamma -= center
    beta[0] += center
    fitted = X @ beta + smooth_vals - center

    smooth = MonotoneSmooth(
        gamma_raw=np.concatenate([[gamma[0]], raw_steps]), lam=lam_val, basis=basis)
    return ScamFit(
        beta=beta, smooth=smooth, fitted_values=fitted,
        sse=float(sse), gcv=float(gcv), edf=float(edf), lam=lam_val,
        converged=converged, n_iter=int(nit),
        objective=float(trace[-1]), objective_trace=trace,
        warm=(v_star, theta),
    )
