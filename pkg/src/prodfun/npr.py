"""Production-function estimation from firms' stated expectations.

The estimator treats a firm's one-year-ahead expectations as sufficient
statistics for its information set. Expected log output net of the expected
input contribution,

    Z = mu_y - beta_k k_next - beta_l mu_l,

is a monotone index of the firm's current productivity (expected productivity
is current productivity passed through its persistence), so current output
satisfies

    y = beta_k k + beta_l l + Psi(Z) + noise

for a monotone function Psi, and conditioning on Z leaves only optimization
error in the inputs. The coefficients are estimated by backfitting: compute Z
from the current coefficients, refit a partially linear model with a monotone
smooth in Z, and repeat until the coefficients settle. A grid of starting
values guards against bad fixed points; the winner is the converged run with
the smallest sum of squared errors.

Variants: a translog second-order family, a Wald ratio estimator using only
mean forecast errors, and two bias-robust loops that strip firm-invariant or
covariate-driven expectation bias out of Z before refitting.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import (
    EstimationResult,
    FirmYear,
    NoUsableObservationsError,
    Panel,
    PanelError,
    ProductionSpec,
    join_lead,
)
from .scam import AUTO, fit_scam

logger = logging.getLogger(__name__)

#: coefficient values whose cartesian square forms the default start grid
GRID_POINTS = (0.05, 0.333, 0.617, 0.9)
DEFAULT_GRID = tuple((bk, bl) for bk in GRID_POINTS for bl in GRID_POINTS)

_SSE_RISE_TOL = 1e-3    # final sse may exceed the run's best cycle sse by this
_SSE_SPREAD_TOL = 1e-2  # converged runs above the best sse by more are spurious
_RELAM_STEP = 0.05      # re-tune lambda when coefficients move more than this
_CAP_SOFT = 1.25        # stop when two straight cycles end above cap * this
_CAP_HARD = 2.0         # ... or one cycle ends above cap * this
_CAP_DESCENT = 0.02     # ... but only once the per-cycle sse improvement has
#                         fallen below this share (a run still descending is
#                         in transit, not stuck above the cap)
_SSE_EPS_REL = 1e-8     # absolute cushion for every sse comparison, as a share
#                         of n*var(y): on near-exact fits (sse ~ solver noise)
#                         relative checks alone would demote every run


@dataclass
class NprConfig:
    init_grid: tuple = DEFAULT_GRID
    tol: float = 1e-6
    max_backfit_iters: int = 200
    bootstrap_reps: int = 100
    family: str = "cobb_douglas"
    q: int = 20                  # basis size of the monotone smooth
    bootstrap_seed: int = 0
    max_bias_iters: int = 100
    bias_tol: float = 1e-5
    bias_damping: float = 0.5

    def __post_init__(self):
        if not self.init_grid:
            raise ValueError("init_grid must be nonempty")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.family not in ("cobb_douglas", "translog"):
            raise ValueError(f"unknown family {self.family!r}")


def npr_z(row: FirmYear, spec: ProductionSpec, k_next: float) -> float:
    """Expectation-based productivity argument for one observation.

    `row` holds the beliefs formed about the next period; `k_next` is the
    next period's log capital (already determined by current investment).
    """
    missing = [name for name, var in (("belief_mu_y", "y"), ("belief_mu_l", "l"))
               if getattr(row.belief(var), "mu", None) is None]
    if spec.family == "translog" and getattr(row.belief("l"), "sigma2", None) is None:
        missing.append("belief_sigma2_l")
    if missing:
        raise PanelError(
            f"row ({row.firm_id}, {row.year}) missing {', '.join(missing)}")
    mu_y = row.belief("y").mu
    mu_l = row.belief("l").mu
    z = mu_y - spec.beta_k * k_next - spec.beta_l * mu_l
    if spec.family == "translog":
        e_l2 = row.belief("l").sigma2 + mu_l**2
        z -= (spec.beta_k2 * k_next**2 + spec.beta_l2 * e_l2
              + spec.beta_lk * k_next * mu_l)
    return float(z)


# ---------------------------------------------------------------------------
# estimating sample
# ---------------------------------------------------------------------------

@dataclass
class _Sample:
    """Arrays pairing current realizations with beliefs about the next year.

    The regression runs on the current year's (y, l, k); the lead year
    contributes k_next (already determined when the beliefs were stated) and
    the realizations (y_lead, l_lead) used by the Wald ratio and the
    forecast-gap bias corrections.
    """

    y: np.ndarray          # current log output
    l: np.ndarray          # current log labor
    k: np.ndarray          # current log capital
    k_next: np.ndarray     # next-period log capital
    y_lead: np.ndarray     # realized next-period log output
    l_lead: np.ndarray     # realized next-period log labor
    mu_y: np.ndarray
    mu_l: np.ndarray
    sigma2_l: np.ndarray
    firm_ids: np.ndarray
    years: np.ndarray      # current years, for the dummies
    rows: list             # belief-holder FirmYear per observation
    X: np.ndarray = None
    dummy_years: tuple = ()
    dropped: dict = field(default_factory=dict)

    @property
    def n_firms(self) -> int:
        return len(set(self.firm_ids.tolist()))


def _build_sample(panel: Panel, family: str) -> _Sample:
    pairs = join_lead(panel)
    if not pairs:
        raise PanelError("panel has no firm with two consecutive years")
    need_s2 = family == "translog"
    cols = {key: [] for key in
            ("y", "l", "k", "k_next", "y_lead", "l_lead", "mu_y", "mu_l", "s2")}
    firm_ids, years, rows = [], [], []
    dropped: dict[str, int] = {}
    for row, lead in pairs:
        mu_y = getattr(row.belief("y"), "mu", None)
        mu_l = getattr(row.belief("l"), "mu", None)
        s2 = getattr(row.belief("l"), "sigma2", None)
        if mu_y is None or mu_l is None or (need_s2 and s2 is None):
            which = ("mu_y" if mu_y is None else
                     "mu_l" if mu_l is None else "sigma2_l")
            dropped[f"missing_{which}"] = dropped.get(f"missing_{which}", 0) + 1
            continue
        cols["y"].append(row.y)
        cols["l"].append(row.l)
        cols["k"].append(row.k)
        cols["k_next"].append(lead.k)
        cols["y_lead"].append(lead.y)
        cols["l_lead"].append(lead.l)
        cols["mu_y"].append(mu_y)
        cols["mu_l"].append(mu_l)
        cols["s2"].append(s2 if s2 is not None else 0.0)
        firm_ids.append(row.firm_id)
        years.append(row.year)
        rows.append(row)
    if not cols["y"]:
        raise NoUsableObservationsError(dropped)
    sample = _Sample(
        y=np.array(cols["y"]), l=np.array(cols["l"]), k=np.array(cols["k"]),
        k_next=np.array(cols["k_next"]), y_lead=np.array(cols["y_lead"]),
        l_lead=np.array(cols["l_lead"]),
        mu_y=np.array(cols["mu_y"]), mu_l=np.array(cols["mu_l"]),
        sigma2_l=np.array(cols["s2"]), firm_ids=np.array(firm_ids),
        years=np.array(years), rows=rows, dropped=dropped,
    )
    base = [np.ones_like(sample.y), sample.k, sample.l]
    if family == "translog":
        base += [sample.k**2, sample.l**2, sample.k * sample.l]
    uniq = np.unique(sample.years)
    sample.dummy_years = tuple(int(u) for u in uniq[1:])
    dummies = [(sample.years == u).astype(float) for u in uniq[1:]]
    sample.X = np.column_stack(base + dummies)
    return sample


def _z_values(sample: _Sample, bk: float, bl: float, second=None, offset=None):
    kn = sample.k_next
    z = sample.mu_y - bk * kn - bl * sample.mu_l
    if second is not None:
        bk2, bl2, blk = second
        z = z - (bk2 * kn**2 + bl2 * (sample.sigma2_l + sample.mu_l**2)
                 + blk * kn * sample.mu_l)
    if offset is not None:
        z = z - offset
    return z


# ---------------------------------------------------------------------------
# backfitting
# ---------------------------------------------------------------------------

@dataclass
class _StartFit:
    start: tuple
    index: int
    beta: np.ndarray
    second: tuple | None
    sse: float
    iterations: int
    converged: bool
    reason: str | None
    trace: list
    fit: object
    warm: tuple


def _aitken(x0: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Vector Aitken extrapolation of three consecutive fixed-point iterates.

    For a locally linear iteration x_{j+1} = x* + J (x_j - x*) the
    coordinate-wise formula recovers x* whether the map contracts or repels;
    coordinates whose increments have stalled are left at x2.
    """
    d1 = x1 - x0
    d2 = x2 - x1
    denom = d2 - d1
    out = x2.copy()
    ok = np.abs(denom) > 1e-12 * (1.0 + np.abs(x2))
    out[ok] = x2[ok] - d2[ok] ** 2 / denom[ok]
    return np.clip(out, -5.0, 5.0)


def _run_start(sample: _Sample, config: NprConfig, start, index,
               offset=None, warm=None, sse_cap=None,
               sse_eps: float = 0.0) -> _StartFit:
    """One backfit run: cycles of three fixed-point steps followed by an
    Aitken extrapolation.

    The plain update (refit, read off coefficients) has a repelling fixed
    point whenever next-period capital tracks current capital more tightly
    than productivity persists, so iterates drift off the solution at a slow
    geometric rate no matter how close they start. Extrapolating each cycle
    jumps onto the fixed point, where the step-to-step distance then does
    fall below tol. The iteration can also settle on a fixed point that is
    not the least-squares solution; such runs end with an sse above the best
    level they passed through, and are marked non-converged. When sse_cap
    (the sse of an already-converged run) is given, runs stuck far above it
    are cut off early rather than iterated to their spurious rest point.
    """
    translog = config.family == "translog"
    dim = 5 if translog else 2
    x = np.zeros(dim)
    x[0], x[1] = float(start[0]), float(start[1])
    if len(start) == 5:          # restart from a translog point estimate
        x[2:] = [float(v) for v in start[2:]]

    # Retuning the smoothing level is several times the cost of a fixed-level
    # refit, and the optimum only drifts when the index coefficients move, so
    # hold lambda until they do.
    relam_at = None
    lam_frozen = None

    def one_fit(vec, warm):
        nonlocal relam_at, lam_frozen
        second = tuple(vec[2:]) if translog else None
        z = _z_values(sample, vec[0], vec[1], second, offset)
        retune = (relam_at is None
                  or float(np.linalg.norm(vec - relam_at)) > _RELAM_STEP)
        lam = AUTO if retune else lam_frozen
        fit = fit_scam(sample.y, sample.X, z, q=config.q, warm=warm, lam=lam)
        if retune:
            relam_at = vec.copy()
            lam_frozen = fit.lam
        new = fit.beta[1:1 + dim].astype(float)
        return new, fit

    trace: list[float] = []
    cycle_sses: list[float] = []
    fit = None
    reason = None
    converged = False
    fits = 0
    while fits < config.max_backfit_iters and not converged:
        triple = []
        for _ in range(3):
            new, fit = one_fit(x, warm)
            warm = fit.warm
            fits += 1
            trace.append(fit.sse)
            dist = float(np.linalg.norm(new - x))
            x = new
            triple.append(new)
            if dist < config.tol:
                converged = True
                break
            if fits >= config.max_backfit_iters:
                break
        if converged or len(triple) < 3:
            break
        cycle_sses.append(trace[-1])
        if sse_cap is not None and len(cycle_sses) >= 2:
            stalled = (cycle_sses[-2] - cycle_sses[-1]
                       <= _CAP_DESCENT * cycle_sses[-1])
            if stalled and (
                    trace[-1] > _CAP_HARD * sse_cap + sse_eps
                    or min(cycle_sses[-2:]) > _CAP_SOFT * sse_cap + sse_eps):
                reason = "sse_above_best"
                break
        x = _aitken(*triple)
    if converged and cycle_sses and (
            fit.sse > min(cycle_sses) * (1.0 + _SSE_RISE_TOL) + sse_eps):
        converged = False
        reason = "sse_increase"
        logger.warning(
            "start %s: settled where sse (%.6g) exceeds the best level passed "
            "through (%.6g); marking run non-converged",
            start, fit.sse, min(cycle_sses))
    elif not converged and reason is None:
        reason = "max_iterations"

    beta = fit.beta.copy()
    beta[1:1 + dim] = x
    second = tuple(float(v) for v in x[2:]) if translog else None
    return _StartFit(start=tuple(start), index=index, beta=beta, second=second,
                     sse=fit.sse, iterations=fits, converged=converged,
                     reason=reason, trace=trace, fit=fit, warm=warm)


def _fit_sample(sample: _Sample, config: NprConfig, offset=None,
                grid=None, warm=None) -> tuple[EstimationResult, _StartFit]:
    grid = tuple(grid if grid is not None else config.init_grid)
    runs: list[_StartFit] = []
    lam_hint = warm
    sse_cap = None
    sse_eps = _SSE_EPS_REL * len(sample.y) * float(np.var(sample.y))
    for j, start in enumerate(grid):
        run = _run_start(sample, config, start, j, offset, warm=lam_hint,
                         sse_cap=sse_cap, sse_eps=sse_eps)
        runs.append(run)
        # reuse the first run's smoothing level as the Newton start elsewhere
        if j == 0 and run.warm is not None:
            lam_hint = (run.warm[0], np.empty(0))
        if run.converged:
            sse_cap = run.sse if sse_cap is None else min(sse_cap, run.sse)
    winners = [r for r in runs if r.converged]
    if winners:
        # Distinct fixed points of the iteration sit far apart in sse, while
        # runs that found the same one agree to a few parts in 1e4. Anything
        # well above the best converged sse settled somewhere spurious.
        floor = min(r.sse for r in winners)
        for r in winners:
            if r.sse > floor * (1.0 + _SSE_SPREAD_TOL) + sse_eps:
                r.converged = False
                r.reason = "sse_above_best"
        winners = [r for r in winners if r.converged]
    pool = winners if winners else runs
    if not winners:
        logger.warning("no start converged; returning best-effort coefficients")
    best = min(pool, key=lambda r: (r.sse, r.index))

    p_base = 6 if config.family == "translog" else 3
    year_effects = {int(np.min(sample.years)): 0.0} if len(sample.dummy_years) else {}
    year_effects.update(
        {yr: float(b) for yr, b in zip(sample.dummy_years, best.beta[p_base:])})
    kwargs = {}
    if config.family == "translog":
        kwargs = dict(beta_k2=float(best.beta[3]), beta_l2=float(best.beta[4]),
                      beta_lk=float(best.beta[5]))
    spec = ProductionSpec(
        family=config.family, beta0=float(best.beta[0]),
        beta_l=float(best.beta[2]), beta_k=float(best.beta[1]),
        year_effects=year_effects, **kwargs)
    result = EstimationResult(
        spec=spec,
        method="NPR_Translog" if config.family == "translog" else "NPR",
        objective=float(best.sse),
        iterations=best.iterations,
        converged=bool(winners),
        n_obs=len(sample.y),
        n_firms=sample.n_firms,
        extra={
            "start": best.start,
            "start_index": best.index,
            "smooth": best.fit.smooth,
            "lam": best.fit.lam,
            "sse_trace": list(best.trace),
            "dropped": dict(sample.dropped),
            "grid": [
                {"start": r.start, "beta_k": float(r.beta[1]),
                 "beta_l": float(r.beta[2]), "sse": r.sse,
                 "iterations": r.iterations, "converged": r.converged,
                 "reason": r.reason}
                for r in runs
            ],
        },
    )
    return result, best


def npr_fit(panel: Panel, config: NprConfig | None = None) -> EstimationResult:
    """Backfitting estimator over all grid starts; winner = lowest sse among
    converged runs. std_errors come from a firm-cluster bootstrap when
    config.bootstrap_reps > 0."""
    config = config or NprConfig()
    sample = _build_sample(panel, config.family)
    result, best = _fit_sample(sample, config)
    if config.bootstrap_reps > 0:
        result.std_errors = bootstrap_se(panel, config, point=result)
    return result


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def bootstrap_se(panel: Panel, config: NprConfig,
                 point: EstimationResult | None = None) -> dict[str, float]:
    """Firm-cluster bootstrap standard errors for the backfitting estimator.

    Firms are resampled with replacement (resampled copies get fresh ids so
    panel keys stay unique) and the model is refit from the point estimate's
    winning start only.
    """
    if config.bootstrap_reps < 10:
        raise ValueError("bootstrap needs at least 10 replications")
    if point is None:
        point = npr_fit(panel, replace(config, bootstrap_reps=0))
    start = point.spec.beta_k, point.spec.beta_l
    if config.family == "translog":
        start = start + (point.spec.beta_k2, point.spec.beta_l2,
                         point.spec.beta_lk)
    inner = replace(config, init_grid=(start,), bootstrap_reps=0)
    by_firm: dict[str, list[FirmYear]] = {}
    for row in panel:
        by_firm.setdefault(row.firm_id, []).append(row)
    firms = sorted(by_firm)
    rng = np.random.default_rng(np.random.SeedSequence(config.bootstrap_seed))
    draws: list[list[float]] = []
    for b in range(config.bootstrap_reps):
        chosen = rng.choice(len(firms), size=len(firms), replace=True)
        rows = [replace(r, firm_id=f"b{j:04d}:{firms[i]}")
                for j, i in enumerate(chosen) for r in by_firm[firms[i]]]
        try:
            res, _ = _fit_sample(_build_sample(Panel(rows), config.family), inner)
        except PanelError:
            continue
        if res.converged:
            coefs = [res.spec.beta_k, res.spec.beta_l]
            if config.family == "translog":
                coefs += [res.spec.beta_k2, res.spec.beta_l2, res.spec.beta_lk]
            draws.append(coefs)
    if len(draws) < 10:
        raise RuntimeError(
            f"only {len(draws)} successful bootstrap replications (need >= 10)")
    arr = np.array(draws)
    names = ["beta_k", "beta_l"]
    if config.family == "translog":
        names += ["beta_k2", "beta_l2", "beta_lk"]
    return {name: float(np.std(arr[:, i], ddof=1)) for i, name in enumerate(names)}


# ---------------------------------------------------------------------------
# Wald ratio estimator
# ---------------------------------------------------------------------------

def wald_beta_l(panel: Panel) -> EstimationResult:
    """beta_l from mean forecast errors: mean(mu_y - y') / mean(mu_l - l').

    Only informative when labor expectations are biased on average; an
    (approximately) unbiased denominator is an error, not an estimate.
    """
    sample = _build_sample(panel, "cobb_douglas")
    num = float(np.mean(sample.mu_y - sample.y_lead))
    den = float(np.mean(sample.mu_l - sample.l_lead))
    if abs(den) < 1e-6:
        raise ValueError("labor expectations unbiased; Wald not identified")
    bl = num / den
    spec = ProductionSpec(family="cobb_douglas", beta0=0.0, beta_l=bl, beta_k=0.0)
    return EstimationResult(
        spec=spec, method="Wald", objective=math.nan, iterations=0,
        converged=True, n_obs=len(sample.y), n_firms=sample.n_firms,
        extra={"identifies": ("beta_l",), "numerator": num, "denominator": den})


# ---------------------------------------------------------------------------
# bias-robust loops
# ---------------------------------------------------------------------------

def _forecast_gaps(sample: _Sample, beta: np.ndarray, family: str) -> np.ndarray:
    """Per observation: (expectation-implied productivity) - (realized
    productivity), i.e. a - b with a = mu_y - f(k_next, E[l_next]) and
    b = y_next - f(k_next, l_next). Systematic expectation bias survives in
    the firm-level mean of a - b; honest forecast noise averages out."""
    bk, bl = beta[1], beta[2]
    second = tuple(beta[3:6]) if family == "translog" else None
    a = _z_values(sample, bk, bl, second)
    kn, ln = sample.k_next, sample.l_lead
    b = sample.y_lead - bk * kn - bl * ln
    if second is not None:
        bk2, bl2, blk = second
        b = b - (bk2 * kn**2 + bl2 * ln**2 + blk * kn * ln)
    return a - b


def _point_grid(best: _StartFit, family: str) -> tuple:
    hi = 6 if family == "translog" else 3
    return (tuple(float(v) for v in best.beta[1:hi]),)


def _bias_loop(panel: Panel, config: NprConfig, update):
    """Shared outer iteration: refit with Z shifted by the current bias terms,
    then let `update(gaps, state, sample) -> (state, offset, delta)` absorb
    the new firm-level information. Damping is applied inside `update`."""
    sample = _build_sample(panel, config.family)
    state = None
    offset = None
    result = best = None
    warm = None
    converged = False
    outer = 0
    hi = 6 if config.family == "translog" else 3
    for outer in range(1, config.max_bias_iters + 1):
        grid = config.init_grid if outer == 1 else _point_grid(best, config.family)
        prev_beta = None if best is None else best.beta.copy()
        result, best = _fit_sample(sample, config, offset=offset,
                                   grid=grid, warm=warm)
        warm = (best.warm[0], np.empty(0)) if best.warm is not None else None
        gaps = _forecast_gaps(sample, best.beta, config.family)
        state, offset, d_state = update(gaps, state, sample)
        d_beta = (math.inf if prev_beta is None
                  else float(np.linalg.norm(best.beta[1:hi] - prev_beta[1:hi])))
        if max(d_beta, d_state) < config.bias_tol:
            converged = True
            break
    # refit once more so the reported coefficients reflect the final bias terms
    result, best = _fit_sample(sample, config, offset=offset,
                               grid=_point_grid(best, config.family), warm=warm)
    result.converged = result.converged and converged
    result.iterations = outer
    return sample, result, state


def npr_bias_invariant(panel: Panel, config: NprConfig | None = None
                       ) -> tuple[EstimationResult, dict[str, float]]:
    """Backfitting that is robust to firm-specific, time-invariant expectation
    bias: alternate between fitting with Z shifted by -iota_i and updating
    iota_i as the firm mean of the forecast gaps."""
    config = config or NprConfig()
    probe = _build_sample(panel, config.family)
    counts: dict[str, int] = {}
    for fid in probe.firm_ids.tolist():
        counts[fid] = counts.get(fid, 0) + 1
    bad = sorted(f for f, c in counts.items() if c < 2)
    if bad:
        logger.warning("dropping %d firm(s) with < 2 forecast-error periods", len(bad))
        keep = [r for r in panel if counts.get(r.firm_id, 0) >= 2]
        if not keep:
            raise NoUsableObservationsError({"too_few_periods": len(bad)})
        panel = Panel(keep)

    damp = config.bias_damping

    def update(gaps, state, sample):
        means = {}
        for fid in np.unique(sample.firm_ids):
            means[fid] = float(np.mean(gaps[sample.firm_ids == fid]))
        if state is None:
            new = means
        else:
            new = {f: state[f] + damp * (means[f] - state[f]) for f in means}
        offset = np.array([new[f] for f in sample.firm_ids])
        d = max(abs(new[f] - (state or {}).get(f, 0.0)) for f in new)
        return new, offset, d

    _, result, iota = _bias_loop(panel, config, update)
    result.method = "NPR_BiasInvariant"
    return result, iota


def npr_bias_covariate(panel: Panel, covariates: list[str],
                       config: NprConfig | None = None
                       ) -> tuple[EstimationResult, np.ndarray]:
    """Backfitting robust to expectation bias that is linear in observed
    firm attributes: the forecast gaps are regressed on the covariates and
    the fitted bias is removed from Z, iterating to a joint fixed point.

    Returns the estimation result and the bias coefficients
    (intercept first, then one per covariate)."""
    config = config or NprConfig()
    if not covariates:
        raise ValueError("need at least one covariate name")
    sample = _build_sample(panel, config.family)
    cov_cols = []
    for name in covariates:
        vals = [(r.aux or {}).get(name) for r in sample.rows]
        if any(v is None for v in vals):
            raise PanelError(f"covariate {name!r} missing on some rows")
        cov_cols.append(np.asarray(vals, dtype=float))
    W = np.column_stack([np.ones(len(sample.y))] + cov_cols)
    damp = config.bias_damping

    def update(gaps, state, _sample):
        lam_target, *_ = np.linalg.lstsq(W, gaps, rcond=None)
        lam = lam_target if state is None else state + damp * (lam_target - state)
        offset = W @ lam
        d = float(np.max(np.abs(lam - (state if state is not None else 0.0))))
        return lam, offset, d

    _, result, lam = _bias_loop(panel, config, update)
    result.method = "NPR_BiasCovariate"
    result.extra["lambda_names"] = ("const",) + tuple(covariates)
    return result, np.asarray(lam)
