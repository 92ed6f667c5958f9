"""Core panel data types: firm-year observations, belief attachments, validation,
lead/lag joins, and CSV ingestion.

All quantities are stored in logs. Ingestion takes levels and logs them; rows
whose required level variables are non-positive are dropped with a per-row
reason code. Belief columns are already in log space and pass through as-is.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence


class PanelError(ValueError):
    """Structural problem with a panel (duplicate keys, malformed rows)."""


class NoUsableObservationsError(PanelError):
    """Validation removed every row; carries the per-reason drop counts."""

    def __init__(self, reasons: dict[str, int]):
        super().__init__(f"no usable observations (dropped: {dict(reasons)})")
        self.reasons = dict(reasons)


@dataclass(frozen=True)
class BeliefDistribution:
    """A subjective lognormal over a one-year-ahead variable, in log space.

    mu / sigma2 are the mean and variance of the log variable. sigma2 may be
    None when a survey elicited only a point expectation.
    """

    mu: float
    sigma2: float | None = None
    fit_mad: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise ValueError(f"belief mu must be finite, got {self.mu}")
        if self.sigma2 is not None and not (self.sigma2 >= 0.0):
            raise ValueError(f"belief sigma2 must be >= 0, got {self.sigma2}")


@dataclass
class FirmYear:
    """One firm-year observation. y, l, k are required logs; m and inv are
    optional logs; beliefs maps variable name in {y, l, m} to a
    BeliefDistribution; aux holds named covariates (e.g. a mgmt score)."""

    firm_id: str
    year: int
    y: float
    l: float
    k: float
    m: float | None = None
    inv: float | None = None
    beliefs: dict[str, BeliefDistribution] | None = None
    aux: dict[str, float] | None = None

    def belief(self, var: str) -> BeliefDistribution | None:
        if self.beliefs is None:
            return None
        return self.beliefs.get(var)


class Panel:
    """An immutable collection of FirmYear rows, sorted by (firm_id, year)
    with unique keys. Safe to share read-only across parallel workers."""

    def __init__(self, rows: Iterable[FirmYear]):
        rows = sorted(rows, key=lambda r: (r.firm_id, r.year))
        seen = set()
        for r in rows:
            key = (r.firm_id, r.year)
            if key in seen:
                raise PanelError(f"duplicate key {key}")
            seen.add(key)
        self._rows: tuple[FirmYear, ...] = tuple(rows)
        # populated by validate_panel for reporting; empty on fresh panels
        self.dropped: dict[str, int] = {}

    @property
    def rows(self) -> tuple[FirmYear, ...]:
        return self._rows

    @property
    def years(self) -> list[int]:
        return sorted({r.year for r in self._rows})

    @property
    def n_firms(self) -> int:
        return len({r.firm_id for r in self._rows})

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self) -> Iterator[FirmYear]:
        return iter(self._rows)


@dataclass
class ProductionSpec:
    """Estimated (or true) production-function coefficients.

    family is 'cobb_douglas' or 'translog'; the second-order terms must be
    present exactly when family is 'translog'.
    """

    family: str
    beta0: float
    beta_l: float
    beta_k: float
    beta_l2: float | None = None
    beta_k2: float | None = None
    beta_lk: float | None = None
    year_effects: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in ("cobb_douglas", "translog"):
            raise ValueError(f"unknown family {self.family!r}")
        second = (self.beta_l2, self.beta_k2, self.beta_lk)
        if self.family == "translog" and any(v is None for v in second):
            raise ValueError("translog spec requires beta_l2, beta_k2, beta_lk")
        if self.family == "cobb_douglas" and any(v is not None for v in second):
            raise ValueError("cobb_douglas spec must not carry second-order terms")

    def input_terms(self, k, l):
        """f(k, l) minus the intercept and year effects (vectorized)."""
        out = self.beta_k * k + self.beta_l * l
        if self.family == "translog":
            out = out + self.beta_k2 * k**2 + self.beta_l2 * l**2 + self.beta_lk * k * l
        return out

    def coef_dict(self) -> dict[str, float]:
        d = {"beta0": self.beta0, "beta_l": self.beta_l, "beta_k": self.beta_k}
        if self.family == "translog":
            d.update(beta_l2=self.beta_l2, beta_k2=self.beta_k2, beta_lk=self.beta_lk)
        return d


@dataclass
class EstimationResult:
    """Coefficients plus convergence diagnostics from any estimator."""

    spec: ProductionSpec
    method: str
    objective: float
    iterations: int
    converged: bool
    n_obs: int
    n_firms: int
    std_errors: dict[str, float] | None = None
    extra: dict = field(default_factory=dict)

    METHODS = (
        "NPR", "NPR_Translog", "NPR_BiasInvariant", "NPR_BiasCovariate",
        "Wald", "OLS", "OLS_FD", "OLS_FE", "OP", "LP", "ACF",
    )

    def __post_init__(self):
        if self.method not in self.METHODS:
            raise ValueError(f"unknown method {self.method!r}")


# ---------------------------------------------------------------------------
# validation and joins
# ---------------------------------------------------------------------------

#: requirement name -> accessor returning the value (None when missing)
_FIELD_ACCESSORS = {
    "y": lambda r: r.y,
    "l": lambda r: r.l,
    "k": lambda r: r.k,
    "m": lambda r: r.m,
    "inv": lambda r: r.inv,
    "mu_y": lambda r: getattr(r.belief("y"), "mu", None),
    "sigma2_y": lambda r: getattr(r.belief("y"), "sigma2", None),
    "mu_l": lambda r: getattr(r.belief("l"), "mu", None),
    "sigma2_l": lambda r: getattr(r.belief("l"), "sigma2", None),
    "mu_m": lambda r: getattr(r.belief("m"), "mu", None),
    "sigma2_m": lambda r: getattr(r.belief("m"), "sigma2", None),
}


def _get_field(row: FirmYear, name: str):
    try:
        return _FIELD_ACCESSORS[name](row)
    except KeyError:
        # anything else is looked up in aux
        return (row.aux or {}).get(name)


def validate_panel(panel: Panel, requirements: Iterable[str]) -> Panel:
    """Keep only rows where every required field is present and finite.

    Returns a new Panel whose .dropped attribute counts drops per reason
    (reason codes are 'missing_<field>'). Raises NoUsableObservationsError
    when nothing survives.
    """
    requirements = list(requirements)
    kept = []
    reasons: Counter[str] = Counter()
    for row in panel:
        missing = [f for f in requirements
                   if (v := _get_field(row, f)) is None or not math.isfinite(v)]
        if missing:
            reasons[f"missing_{missing[0]}"] += 1
        else:
            kept.append(row)
    if not kept:
        raise NoUsableObservationsError(dict(reasons))
    out = Panel(kept)
    out.dropped = dict(reasons)
    return out


def join_lead(panel: Panel, horizon: int = 1) -> list[tuple[FirmYear, FirmYear]]:
    """Pair each row with the same firm's row exactly `horizon` years later."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    index = {(r.firm_id, r.year): r for r in panel}
    pairs = []
    for row in panel:
        lead = index.get((row.firm_id, row.year + horizon))
        if lead is not None:
            pairs.append((row, lead))
    return pairs


# ---------------------------------------------------------------------------
# CSV interface
# ---------------------------------------------------------------------------

PANEL_COLUMNS = [
    "firm_id", "year", "output", "labor", "capital", "materials", "investment",
    "belief_mu_y", "belief_sigma2_y", "belief_mu_l", "belief_sigma2_l",
    "belief_mu_m", "belief_sigma2_m", "mgmt",
]

_LEVEL_COLS = {"output": "y", "labor": "l", "capital": "k",
               "materials": "m", "investment": "inv"}


def _parse_cell(cell: str) -> float | None:
    cell = cell.strip()
    if not cell:
        return None
    return float(cell)


def read_panel_csv(path) -> tuple[Panel, dict[str, int]]:
    """Read the pinned panel schema; log level columns at ingestion.

    Rows with missing/non-positive output, labor, or capital cannot be
    represented and are dropped; the returned dict counts drops per reason.
    Non-positive materials/investment are treated as missing on that row.
    """
    reasons: Counter[str] = Counter()
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing_cols = [c for c in PANEL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing_cols:
            raise PanelError(f"panel csv missing columns: {missing_cols}")
        for rec in reader:
            logs: dict[str, float | None] = {}
            bad = None
            for col, attr in _LEVEL_COLS.items():
                v = _parse_cell(rec[col])
                if v is None or v <= 0.0:
                    logs[attr] = None
                    if attr in ("y", "l", "k"):
                        bad = bad or f"{'missing' if v is None else 'nonpositive'}_{col}"
                    elif v is not None:
                        reasons[f"nonpositive_{col}"] += 1
                else:
                    logs[attr] = math.log(v)
            if bad:
                reasons[bad] += 1
                continue
            beliefs = {}
            for var in ("y", "l", "m"):
                mu = _parse_cell(rec[f"belief_mu_{var}"])
                sigma2 = _parse_cell(rec[f"belief_sigma2_{var}"])
                if mu is None:
                    continue
                if sigma2 is not None and sigma2 < 0:
                    reasons[f"negative_sigma2_{var}"] += 1
                    continue
                beliefs[var] = BeliefDistribution(mu=mu, sigma2=sigma2)
            mgmt = _parse_cell(rec["mgmt"])
            rows.append(FirmYear(
                firm_id=rec["firm_id"], year=int(rec["year"]),
                y=logs["y"], l=logs["l"], k=logs["k"], m=logs["m"], inv=logs["inv"],
                beliefs=beliefs or None,
                aux={"mgmt": mgmt} if mgmt is not None else None,
            ))
    if not rows:
        raise NoUsableObservationsError(dict(reasons))
    return Panel(rows), dict(reasons)


def format_float(x: float) -> str:
    """Serialize a float with 17 significant digits (bit-faithful round trip)."""
    return format(float(x), ".17g")


def _fmt(x: float | None) -> str:
    return "" if x is None else format_float(x)


def write_panel_csv(panel: Panel, path) -> None:
    """Write the pinned schema, exponentiating logs back to levels."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PANEL_COLUMNS)
        for r in panel:
            belief_cells = []
            for var in ("y", "l", "m"):
                b = r.belief(var)
                belief_cells += [_fmt(b.mu) if b else "",
                                 _fmt(b.sigma2) if b and b.sigma2 is not None else ""]
            writer.writerow([
                r.firm_id, r.year,
                _fmt(math.exp(r.y)), _fmt(math.exp(r.l)), _fmt(math.exp(r.k)),
                _fmt(math.exp(r.m)) if r.m is not None else "",
                _fmt(math.exp(r.inv)) if r.inv is not None else "",
                *belief_cells,
                _fmt((r.aux or {}).get("mgmt")),
            ])
