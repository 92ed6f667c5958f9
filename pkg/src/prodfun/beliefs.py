"""Survey belief fitting: five-scenario survey responses to lognormal
subjective distributions, belief moments, and expected log value added.

A response gives five scenario levels ("lowest" to "highest") and the percent
likelihood of each. Because the survey does not say whether a scenario's
likelihood mass sits below or above its stated level, the level is read both
ways: once as a cumulative-distribution point and once as a survival point,
a lognormal is least-squares fitted to each reading, and the reported belief
averages the two fits. Fit quality is summarized by the mean absolute
deviation between reported and fitted probabilities across both readings.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import ndtr

from .datamodel import format_float

__all__ = [
    "ScenarioResponse", "FittedBelief", "SurveyError", "SurveyResponseRow",
    "normalize_likelihoods", "fit_belief", "belief_moments",
    "expected_log_value_added", "synthetic_response",
    "read_survey_csv", "write_survey_csv", "SURVEY_COLUMNS",
]

#: total reported likelihood must land in this window to be usable
LIKELIHOOD_WINDOW = (90.0, 110.0)

#: percentiles at which the synthetic generator places scenario values
GENERATOR_PERCENTILES = (0.05, 0.25, 0.50, 0.75, 0.95)

#: bin-edge scale for the synthetic generator, relative to log-space midpoints
#: between adjacent scenario values. Plain midpoints make the dual-reading fit
#: shrink sigma2 by a scale-free factor of about 0.961 (and probability-space
#: midpoints inflate it by about 1.156); this scale is the root of the
#: one-dimensional calibration that makes the fit exactly unbiased. It depends
#: only on GENERATOR_PERCENTILES, not on (mu, sigma).
GENERATOR_EDGE_SCALE = 0.979071534825

_SIGMA_FLOOR = 1e-3


class SurveyError(ValueError):
    """A survey response that cannot be turned into a belief."""


@dataclass(frozen=True)
class ScenarioResponse:
    """Five scenario levels and their percent likelihoods."""

    values: tuple[float, ...]
    likelihoods: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != 5 or len(self.likelihoods) != 5:
            raise SurveyError("a response needs exactly 5 values and 5 likelihoods")
        if any(not math.isfinite(v) or v < 0.0 for v in self.values):
            raise SurveyError(f"scenario values must be finite and >= 0: {self.values}")
        if any(not math.isfinite(p) or p < 0.0 for p in self.likelihoods):
            raise SurveyError(f"likelihoods must be finite and >= 0: {self.likelihoods}")

    def sorted_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Values ascending with their likelihoods carried along."""
        order = np.argsort(np.asarray(self.values, dtype=float), kind="stable")
        return (np.asarray(self.values, dtype=float)[order],
                np.asarray(self.likelihoods, dtype=float)[order])


@dataclass(frozen=True)
class FittedBelief:
    """A lognormal belief averaged over the CDF and survival readings.

    mu and sigma2 are the mean and variance of the log variable; mad is the
    mean absolute deviation between reported and fitted probabilities;
    method_detail holds the per-reading (mu, sigma2) pairs; degenerate marks
    responses with a single repeated value (sigma2 pinned to 0).
    """

    mu: float
    sigma2: float
    mad: float
    method_detail: dict[str, tuple[float, float]]
    degenerate: bool = False

    def __post_init__(self):
        if self.sigma2 < 0.0 or self.mad < 0.0:
            raise ValueError("sigma2 and mad must be >= 0")


def normalize_likelihoods(r: ScenarioResponse) -> ScenarioResponse:
    """Rescale likelihoods to sum to exactly 100.

    Responses whose total is outside LIKELIHOOD_WINDOW are unusable and
    raise SurveyError (the survey protocol discards them).
    """
    total = float(sum(r.likelihoods))
    lo, hi = LIKELIHOOD_WINDOW
    if not (lo <= total <= hi):
        raise SurveyError(
            f"total likelihood {total:g} outside [{lo:g}, {hi:g}]; discard response")
    scale = 100.0 / total
    return ScenarioResponse(r.values, tuple(p * scale for p in r.likelihoods))


def _lognormal_cdf(log_values: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    return ndtr((log_values - mu) / sigma)


def _fit_one_reading(log_values: np.ndarray, targets: np.ndarray,
                     start: tuple[float, float]) -> tuple[float, float, float]:
    """Least-squares fit of a lognormal CDF to (value, target) points.

    Returns (mu, sigma, mad). sigma is kept above _SIGMA_FLOOR so the CDF
    stays differentiable; the quasi-Newton search runs from the moments start.
    """

    def objective(theta):
        mu, sigma = theta
        resid = _lognormal_cdf(log_values, mu, sigma) - targets
        return float(resid @ resid)

    res = optimize.minimize(
        objective, np.asarray(start, dtype=float), method="L-BFGS-B",
        bounds=[(None, None), (_SIGMA_FLOOR, None)])
    if not res.success:
        raise SurveyError(f"belief fit did not converge: {res.message}")
    mu, sigma = float(res.x[0]), float(res.x[1])
    mad = float(np.mean(np.abs(_lognormal_cdf(log_values, mu, sigma) - targets)))
    return mu, sigma, mad


def fit_belief(r: ScenarioResponse) -> FittedBelief:
    """Fit the dual-reading lognormal to a normalized response.

    The CDF reading targets the running likelihood total at each value (the
    level caps its scenario's mass); the survival reading targets the total
    excluding the scenario's own mass (the level floors it). Each reading is
    fitted by least squares and the final (mu, sigma2) averages the two.
    """
    values, probs = r.sorted_pairs()
    total = float(probs.sum())
    if abs(total - 100.0) > 1e-6:
        raise SurveyError("likelihoods must sum to 100; run normalize_likelihoods")
    if np.any(values <= 0.0):
        raise SurveyError(f"scenario values must be positive for a log fit: {values}")

    log_values = np.log(values)
    if np.ptp(log_values) == 0.0:
        # single repeated value: a point belief
        return FittedBelief(
            mu=float(log_values[0]), sigma2=0.0, mad=0.0, degenerate=True,
            method_detail={"cdf": (float(log_values[0]), 0.0),
                           "survival": (float(log_values[0]), 0.0)})

    weights = probs / total
    mu0 = float(weights @ log_values)
    sigma0 = max(float(np.sqrt(weights @ (log_values - mu0) ** 2)), _SIGMA_FLOOR)

    running = np.cumsum(probs) / 100.0
    targets_cdf = running
    targets_surv = np.concatenate([[0.0], running[:-1]])

    mu_c, sig_c, mad_c = _fit_one_reading(log_values, targets_cdf, (mu0, sigma0))
    mu_s, sig_s, mad_s = _fit_one_reading(log_values, targets_surv, (mu0, sigma0))

    return FittedBelief(
        mu=0.5 * (mu_c + mu_s),
        sigma2=0.5 * (sig_c**2 + sig_s**2),
        mad=0.5 * (mad_c + mad_s),
        method_detail={"cdf": (mu_c, sig_c**2), "survival": (mu_s, sig_s**2)})


def belief_moments(b: FittedBelief) -> dict[str, float]:
    """Log-space and level-space moments of a fitted belief."""
    return {
        "e_log": b.mu,
        "var_log": b.sigma2,
        "e_level": math.exp(b.mu + b.sigma2 / 2.0),
        "e_log_sq": b.sigma2 + b.mu**2,
    }


def expected_log_value_added(b_turnover: FittedBelief, b_materials: FittedBelief,
                             corr: float, n_draws: int = 100_000,
                             seed: int = 0) -> tuple[float, float]:
    """Expected log of (turnover - materials) under a Gaussian copula.

    Draws correlated lognormal pairs, keeps draws with positive value added,
    and returns (mean log value added over kept draws, share kept). A kept
    share below one half triggers a warning: the belief pair puts substantial
    mass on negative value added and the estimate rests on a selected tail.
    """
    if not (-1.0 < corr < 1.0):
        raise ValueError(f"copula correlation must be in (-1, 1), got {corr}")
    if n_draws < 10_000:
        raise ValueError(f"n_draws must be at least 10000, got {n_draws}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_draws, 2))
    z1 = z[:, 0]
    z2 = corr * z[:, 0] + math.sqrt(1.0 - corr**2) * z[:, 1]
    turnover = np.exp(b_turnover.mu + math.sqrt(b_turnover.sigma2) * z1)
    materials = np.exp(b_materials.mu + math.sqrt(b_materials.sigma2) * z2)
    defined = turnover > materials
    share = float(defined.mean())
    if share == 0.0:
        warnings.warn("no draws with positive value added; returning nan")
        return float("nan"), 0.0
    if share < 0.5:
        warnings.warn(
            f"only {share:.1%} of draws have positive value added; "
            "expected log value added is based on a selected tail")
    e_log_va = float(np.mean(np.log(turnover[defined] - materials[defined])))
    return e_log_va, share


def synthetic_response(mu: float, sigma: float) -> ScenarioResponse:
    """A five-scenario response consistent with Lognormal(mu, sigma^2).

    Scenario values sit at the GENERATOR_PERCENTILES quantiles. Likelihoods
    are the masses of the bins bounded by near-midpoint edges (in log space)
    between adjacent values, so they sum to exactly 100 with no rescaling.
    The edges are pulled slightly toward the median (GENERATOR_EDGE_SCALE) so
    that the dual CDF/survival reading of fit_belief recovers (mu, sigma2)
    exactly rather than with the ~4% sigma2 shrinkage plain midpoints give.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    from scipy.special import ndtri

    z_values = ndtri(GENERATOR_PERCENTILES)
    z_edges = GENERATOR_EDGE_SCALE * (z_values[:-1] + z_values[1:]) / 2.0
    cdf_at_edges = ndtr(z_edges)
    upper = np.concatenate([cdf_at_edges, [1.0]])
    lower = np.concatenate([[0.0], cdf_at_edges])
    values = np.exp(mu + sigma * z_values)
    likelihoods = (upper - lower) * 100.0
    return ScenarioResponse(tuple(values), tuple(likelihoods))


# ---------------------------------------------------------------------------
# survey CSV interface
# ---------------------------------------------------------------------------

SURVEY_COLUMNS = ["firm_id", "year", "variable",
                  "v1", "v2", "v3", "v4", "v5", "p1", "p2", "p3", "p4", "p5"]

#: survey variable name -> panel belief variable
SURVEY_VARIABLES = {"turnover": "y", "employment": "l", "materials": "m"}


@dataclass(frozen=True)
class SurveyResponseRow:
    firm_id: str
    year: int
    variable: str
    response: ScenarioResponse


def read_survey_csv(path) -> list[SurveyResponseRow]:
    """Read the pinned survey schema; one row per (firm, year, variable)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SURVEY_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SurveyError(f"survey csv missing columns: {missing}")
        for rec in reader:
            variable = rec["variable"].strip()
            if variable not in SURVEY_VARIABLES:
                raise SurveyError(
                    f"unknown survey variable {variable!r}; "
                    f"expected one of {sorted(SURVEY_VARIABLES)}")
            out.append(SurveyResponseRow(
                firm_id=rec["firm_id"], year=int(rec["year"]), variable=variable,
                response=ScenarioResponse(
                    tuple(float(rec[f"v{i}"]) for i in range(1, 6)),
                    tuple(float(rec[f"p{i}"]) for i in range(1, 6)))))
    return out


def write_survey_csv(rows: list[SurveyResponseRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SURVEY_COLUMNS)
        for row in rows:
            writer.writerow([
                row.firm_id, row.year, row.variable,
                *(format_float(v) for v in row.response.values),
                *(format_float(p) for p in row.response.likelihoods),
            ])
