"""Comparison estimators for the simulated and survey panels.

Three least-squares benchmarks (levels, first differences, within/firm
fixed effects) and the proxy-variable two-stage family: an investment-proxy
fit, a materials-proxy fit, and the two-moment GMM variant whose proxy is
conditioned on labor. All work off realized panel columns only — beliefs
never enter here.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
from scipy import optimize

from .datamodel import (
    EstimationResult,
    NoUsableObservationsError,
    Panel,
    PanelError,
    ProductionSpec,
    join_lead,
    validate_panel,
)

logger = logging.getLogger(__name__)


@dataclass
class ProxyConfig:
    """Settings shared by the proxy-variable estimators.

    poly_degree is the total degree of the first-stage polynomial;
    productivity_law fixes how lagged productivity is projected out
    (an AR(1) with intercept is the only supported law); gtol/maxiter
    feed the stage-two quasi-Newton search; plausibility_filter records
    whether summaries downstream should drop coefficient pairs outside
    the unit square.
    """

    poly_degree: int = 3
    productivity_law: str = "ar1"
    gtol: float = 1e-10
    maxiter: int = 500
    plausibility_filter: bool = True

    def __post_init__(self):
        if self.poly_degree < 1:
            raise ValueError("poly_degree must be >= 1")
        if self.productivity_law != "ar1":
            raise ValueError(f"unsupported productivity law "
                             f"{self.productivity_law!r}")


# ---------------------------------------------------------------------------
# small shared pieces
# ---------------------------------------------------------------------------

def _columns(pan: Panel, fields: tuple[str, ...]) -> dict[str, np.ndarray]:
    out: dict[str, list] = {f: [] for f in fields}
    for row in pan:
        for f in fields:
            out[f].append(getattr(row, f))
    return {f: np.asarray(v, dtype=float) for f, v in out.items()}


def _year_dummies(years: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Indicator columns for every year after the first (sorted) one."""
    uniq = sorted({int(v) for v in years})
    cols = [(years == yr).astype(float) for yr in uniq[1:]]
    mat = np.column_stack(cols) if cols else np.empty((len(years), 0))
    return mat, uniq


def _lstsq(X: np.ndarray, y: np.ndarray, what: str) -> np.ndarray:
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise PanelError(f"{what} design is rank deficient; "
                         "not enough independent variation")
    return np.linalg.lstsq(X, y, rcond=None)[0]


def _poly(vals: dict[str, np.ndarray], degree: int) -> tuple[np.ndarray, list[str]]:
    """Monomials of total degree 1..degree over the given columns, in a
    deterministic order; names like 'k^2*m' tag the returned columns."""
    keys = list(vals)
    n = len(next(iter(vals.values())))
    cols, names = [], []
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(keys, d):
            col = np.ones(n)
            for key in combo:
                col = col * vals[key]
            cols.append(col)
            parts = []
            for key in keys:
                c = combo.count(key)
                if c == 1:
                    parts.append(key)
                elif c > 1:
                    parts.append(f"{key}^{c}")
            names.append("*".join(parts))
    return np.column_stack(cols), names


def _result(method: str, beta_l: float, beta_k: float, *, beta0=math.nan,
            year_effects=None, objective=0.0, iterations=0, converged=True,
            n_obs=0, n_firms=0, extra=None) -> EstimationResult:
    spec = ProductionSpec(family="cobb_douglas", beta0=float(beta0),
                          beta_l=float(beta_l), beta_k=float(beta_k),
                          year_effects=year_effects or {})
    return EstimationResult(spec=spec, method=method, objective=float(objective),
                            iterations=int(iterations), converged=bool(converged),
                            n_obs=int(n_obs), n_firms=int(n_firms),
                            extra=extra or {})


# ---------------------------------------------------------------------------
# least-squares benchmarks
# ---------------------------------------------------------------------------

def ols_levels(panel: Panel) -> EstimationResult:
    """Regress log output on log labor, log capital, and year dummies."""
    pan = validate_panel(panel, ["y", "l", "k"])
    c = _columns(pan, ("y", "l", "k", "year"))
    dummies, uniq = _year_dummies(c["year"])
    X = np.column_stack([np.ones(len(c["y"])), c["l"], c["k"], dummies])
    coef = _lstsq(X, c["y"], "levels")
    resid = c["y"] - X @ coef
    year_effects = {uniq[0]: 0.0} if len(uniq) > 1 else {}
    year_effects.update({yr: float(b) for yr, b in zip(uniq[1:], coef[3:])})
    return _result("OLS", coef[1], coef[2], beta0=coef[0],
                   year_effects=year_effects,
                   objective=float(resid @ resid), n_obs=len(pan),
                   n_firms=pan.n_firms, extra={"dropped": dict(pan.dropped)})


def ols_fd(panel: Panel) -> EstimationResult:
    """Regress one-year output growth on input growth and year dummies.

    The level term drops out of differences, so beta0 is reported as nan and
    the estimated drift lands in extra.
    """
    pan = validate_panel(panel, ["y", "l", "k"])
    pairs = join_lead(pan, 1)
    if not pairs:
        raise NoUsableObservationsError({"no_consecutive_years": len(pan)})
    dy = np.array([b.y - a.y for a, b in pairs])
    dl = np.array([b.l - a.l for a, b in pairs])
    dk = np.array([b.k - a.k for a, b in pairs])
    years = np.array([b.year for a, b in pairs], dtype=float)
    dummies, uniq = _year_dummies(years)
    X = np.column_stack([np.ones(len(dy)), dl, dk, dummies])
    coef = _lstsq(X, dy, "first-difference")
    resid = dy - X @ coef
    return _result("OLS_FD", coef[1], coef[2],
                   objective=float(resid @ resid), n_obs=len(dy),
                   n_firms=len({a.firm_id for a, _ in pairs}),
                   extra={"drift": float(coef[0]),
                          "dropped": dict(pan.dropped)})


def ols_fe(panel: Panel) -> EstimationResult:
    """Within estimator: demean by firm, then regress on inputs and year
    dummies. Firms observed once carry no within variation and are dropped."""
    pan = validate_panel(panel, ["y", "l", "k"])
    counts: dict[str, int] = {}
    for row in pan:
        counts[row.firm_id] = counts.get(row.firm_id, 0) + 1
    rows = [r for r in pan if counts[r.firm_id] > 1]
    n_single = len(pan) - len(rows)
    if not rows:
        raise NoUsableObservationsError({"single_period_firms": n_single})
    keep = Panel(rows)
    c = _columns(keep, ("y", "l", "k", "year"))
    dummies, uniq = _year_dummies(c["year"])
    design = np.column_stack([c["l"], c["k"], dummies])
    firm_ids = np.array([r.firm_id for r in keep])
    y = c["y"].copy()
    for fid in np.unique(firm_ids):
        sel = firm_ids == fid
        y[sel] -= y[sel].mean()
        design[sel] -= design[sel].mean(axis=0)
    coef = _lstsq(design, y, "within")
    resid = y - design @ coef
    year_effects = {uniq[0]: 0.0} if len(uniq) > 1 else {}
    year_effects.update({yr: float(b) for yr, b in zip(uniq[1:], coef[2:])})
    extra = {"dropped": dict(pan.dropped)}
    if n_single:
        extra["dropped"] = {**extra["dropped"], "single_period_firm": n_single}
    return _result("OLS_FE", coef[0], coef[1], year_effects=year_effects,
                   objective=float(resid @ resid), n_obs=len(y),
                   n_firms=len(np.unique(firm_ids)), extra=extra)


# ---------------------------------------------------------------------------
# proxy-variable two-stage estimators
# ---------------------------------------------------------------------------

def _stage2_arrays(pan: Panel, phi: np.ndarray):
    """Pair each observation's proxy value with the same firm's next year."""
    pos = {(r.firm_id, r.year): i for i, r in enumerate(pan)}
    pairs = join_lead(pan, 1)
    if not pairs:
        raise NoUsableObservationsError({"no_consecutive_years": len(pan)})
    i0 = np.array([pos[(a.firm_id, a.year)] for a, _ in pairs])
    i1 = np.array([pos[(b.firm_id, b.year)] for _, b in pairs])
    return pairs, phi[i0], phi[i1], i0, i1


def _ar1_residual(w1: np.ndarray, w0: np.ndarray) -> np.ndarray:
    """Residual from projecting current productivity on its lag (intercept in)."""
    var = float(np.var(w0))
    slope = float(np.cov(w1, w0, bias=True)[0, 1]) / var if var > 0 else 0.0
    const = float(np.mean(w1)) - slope * float(np.mean(w0))
    return w1 - const - slope * w0


def _scalar_search(fun, start, lo=-1.0, hi=2.0, width=0.25, coarse=26):
    """Line search for the local minimum nearest to `start`.

    The moment function has several roots over a wide coefficient range, so
    a global scan can settle far from any economically sensible value. Scan
    a bracket around the start instead, widening toward whichever edge keeps
    winning (clamped to [lo, hi]), then refine with a bounded minimizer.
    """
    a, b = start - width, start + width
    evals = 0
    while True:
        grid = np.linspace(max(lo, a), min(hi, b), coarse)
        vals = [fun(x) for x in grid]
        evals += coarse
        j = int(np.argmin(vals))
        if j == 0 and grid[0] > lo:
            a -= width
        elif j == coarse - 1 and grid[-1] < hi:
            b += width
        else:
            break
    step = grid[1] - grid[0]
    res = optimize.minimize_scalar(
        fun, bounds=(max(lo, grid[j] - step), min(hi, grid[j] + step)),
        method="bounded", options={"xatol": 1e-12})
    return float(res.x), float(res.fun), evals + int(res.nfev), bool(res.success)


def _proxy_fit(panel: Panel, proxy_fields: tuple[str, ...], method: str,
               config: ProxyConfig) -> EstimationResult:
    pan = validate_panel(panel, ["y", "l", "k", *proxy_fields])
    c = _columns(pan, ("y", "l", "k", *proxy_fields))
    poly, names = _poly({f: c[f] for f in ("k", *proxy_fields)},
                        config.poly_degree)
    X = np.column_stack([np.ones(len(c["y"])), c["l"], poly])
    coef = _lstsq(X, c["y"], f"{method} stage-1")
    beta_l = float(coef[1])
    phi = X @ coef - beta_l * c["l"]

    pairs, phi0, phi1, i0, i1 = _stage2_arrays(pan, phi)
    k0, k1 = c["k"][i0], c["k"][i1]

    def objective(bk):
        xi = _ar1_residual(phi1 - bk * k1, phi0 - bk * k0)
        return float(np.mean(xi * k1)) ** 2

    # start the line search from the plain-regression capital coefficient
    ols = _lstsq(np.column_stack([np.ones(len(c["y"])), c["l"], c["k"]]),
                 c["y"], f"{method} stage-2 start")
    beta_k, obj, evals, ok = _scalar_search(objective, start=float(ols[2]))
    return _result(method, beta_l, beta_k, objective=obj, iterations=evals,
                   converged=ok, n_obs=len(pan), n_firms=pan.n_firms,
                   extra={"dropped": dict(pan.dropped), "n_pairs": len(pairs),
                          "stage1_terms": names})


def op_fit(panel: Panel, config: ProxyConfig | None = None) -> EstimationResult:
    """Two-stage fit with log investment as the productivity proxy.

    Stage one regresses output on labor and a polynomial in (capital,
    investment), pinning the labor coefficient. Stage two picks the capital
    coefficient so the productivity innovation is orthogonal to current
    capital. Rows without usable investment (zero or missing) are dropped
    and counted.
    """
    return _proxy_fit(panel, ("inv",), "OP", config or ProxyConfig())


def lp_fit(panel: Panel, config: ProxyConfig | None = None) -> EstimationResult:
    """Two-stage fit with log materials as the productivity proxy; same
    structure as op_fit with materials in the stage-one polynomial."""
    return _proxy_fit(panel, ("m",), "LP", config or ProxyConfig())


def acf_fit(panel: Panel, config: ProxyConfig | None = None,
            start: tuple[float, float] | None = None) -> EstimationResult:
    """Two-moment GMM with the stage-one proxy conditioned on labor.

    Stage one fits output on a polynomial in (capital, labor, materials);
    no structural coefficient is identified there. Stage two treats, for a
    candidate (beta_l, beta_k), the de-inputted proxy as productivity,
    projects it on its own lag, and asks the innovation to be orthogonal to
    current capital and lagged labor. The quadratic form uses the inverse
    sample covariance of the moment contributions at the least-squares
    coefficients, minimized by BFGS.

    The minimizer starts from the least-squares coefficients unless `start`
    supplies an explicit (beta_l, beta_k) pair. The objective has a spurious
    basin near (1, 0) where the AR(1) projection absorbs the proxy entirely;
    a start on the far side of its ridge (e.g. from heavily biased
    least-squares coefficients) can strand the minimizer there, so
    replication studies pass the known coefficients instead.
    """
    config = config or ProxyConfig()
    pan = validate_panel(panel, ["y", "l", "k", "m"])
    c = _columns(pan, ("y", "l", "k", "m"))
    poly, names = _poly({f: c[f] for f in ("k", "l", "m")}, config.poly_degree)
    X1 = np.column_stack([np.ones(len(c["y"])), poly])
    phi = X1 @ _lstsq(X1, c["y"], "ACF stage-1")

    pairs, phi0, phi1, i0, i1 = _stage2_arrays(pan, phi)
    k0, k1 = c["k"][i0], c["k"][i1]
    l0, l1 = c["l"][i0], c["l"][i1]

    def contributions(b):
        bl, bk = b
        xi = _ar1_residual(phi1 - bl * l1 - bk * k1, phi0 - bl * l0 - bk * k0)
        return np.column_stack([xi * k1, xi * l0])

    ls_coef = _lstsq(np.column_stack([np.ones(len(c["y"])), c["l"], c["k"]]),
                     c["y"], "ACF start")
    u = contributions(np.array([ls_coef[1], ls_coef[2]]))
    weight = np.linalg.inv(u.T @ u / len(u))
    x0 = np.array(start if start is not None else (ls_coef[1], ls_coef[2]),
                  dtype=float)

    def objective(b):
        g = contributions(b).mean(axis=0)
        return float(g @ weight @ g)

    res = optimize.minimize(objective, x0, method="BFGS",
                            options={"gtol": config.gtol,
                                     "maxiter": config.maxiter})
    if not res.success:
        logger.warning("stage-2 optimizer stopped early: %s", res.message)
    return _result("ACF", res.x[0], res.x[1], objective=res.fun,
                   iterations=res.nit, converged=res.success,
                   n_obs=len(pan), n_firms=pan.n_firms,
                   extra={"dropped": dict(pan.dropped), "n_pairs": len(pairs),
                          "start": (float(x0[0]), float(x0[1])),
                          "stage1_terms": names})


def filter_plausible(results: list[EstimationResult]) -> list[EstimationResult]:
    """Keep fits whose labor and capital coefficients both lie inside (0, 1)."""
    kept = [r for r in results
            if 0.0 < r.spec.beta_l < 1.0 and 0.0 < r.spec.beta_k < 1.0]
    logger.info("plausibility filter kept %d of %d fits", len(kept), len(results))
    return kept
