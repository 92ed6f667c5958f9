"""Total factor productivity residuals and firm-outcome regressions.

TFP is the production-function residual a = y - f(k, l; coefficients),
demeaned by year so level differences across years (prices, common shocks)
drop out. Outcomes are firm exit, defined from panel presence, and employment
growth measured from t+1 onward so the growth window does not overlap the
inputs that produced the TFP estimate itself.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .datamodel import Panel, ProductionSpec, format_float, validate_panel

__all__ = ["TfpPanel", "OutcomeRegression", "tfp_residuals",
           "outcome_regression", "write_tfp_csv", "GROWTH_OUTCOMES"]

#: outcome column -> (start offset, end offset) of the employment log change
GROWTH_OUTCOMES = {"d_l_t1_t2": (1, 2), "d_l_t1_t5": (1, 5)}


@dataclass
class TfpPanel:
    """Year-demeaned TFP with outcome columns, stored column-wise.

    exit is 1.0 when the year is the firm's last appearance, 0.0 otherwise,
    and nan in the panel's final year, where continuation cannot be observed.
    Growth columns are l_{t+s} - l_{t+1} and nan when either year is missing.
    """

    firm_ids: list[str]
    years: np.ndarray
    tfp: np.ndarray
    outcomes: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.firm_ids)


@dataclass
class OutcomeRegression:
    """OLS of an outcome on TFP and year dummies with HC1 standard errors.

    pi_hat is the coefficient on TFP as stored; pi_hat_std rescales it to a
    one-standard-deviation move in TFP (the se rescales identically).
    """

    outcome: str
    pi_hat: float
    se: float
    pi_hat_std: float
    se_std: float
    n: int
    outcome_mean: float


def tfp_residuals(panel: Panel, spec: ProductionSpec) -> TfpPanel:
    """Compute a = y - f(k, l) demeaned by year, plus outcome columns."""
    panel = validate_panel(panel, ["y", "l", "k"])
    years = np.array([r.year for r in panel], dtype=int)
    y = np.array([r.y for r in panel])
    l = np.array([r.l for r in panel])
    k = np.array([r.k for r in panel])
    a = y - spec.input_terms(k, l)
    for yr in np.unique(years):
        sel = years == yr
        a[sel] -= a[sel].mean()

    last_year = {}
    l_by_key = {}
    for r in panel:
        last_year[r.firm_id] = max(last_year.get(r.firm_id, r.year), r.year)
        l_by_key[(r.firm_id, r.year)] = r.l
    panel_end = int(years.max())

    exit_flag = np.full(len(y), np.nan)
    growth = {name: np.full(len(y), np.nan) for name in GROWTH_OUTCOMES}
    for i, r in enumerate(panel):
        if r.year < panel_end:
            exit_flag[i] = 1.0 if last_year[r.firm_id] == r.year else 0.0
        for name, (s0, s1) in GROWTH_OUTCOMES.items():
            start = l_by_key.get((r.firm_id, r.year + s0))
            end = l_by_key.get((r.firm_id, r.year + s1))
            if start is not None and end is not None:
                growth[name][i] = end - start

    return TfpPanel(
        firm_ids=[r.firm_id for r in panel], years=years, tfp=a,
        outcomes={"exit": exit_flag, **growth})


def outcome_regression(tfp_panel: TfpPanel, outcome_name: str) -> OutcomeRegression:
    """Regress an outcome on TFP and year dummies; HC1 standard errors."""
    if outcome_name not in tfp_panel.outcomes:
        raise KeyError(f"unknown outcome {outcome_name!r}; "
                       f"have {sorted(tfp_panel.outcomes)}")
    out = tfp_panel.outcomes[outcome_name]
    keep = np.isfinite(out)
    if not keep.any():
        raise ValueError(f"outcome {outcome_name!r} has no usable observations")
    yvec = out[keep]
    tfp = tfp_panel.tfp[keep]
    years = tfp_panel.years[keep]

    dummies = [(years == yr).astype(float) for yr in np.unique(years)[1:]]
    X = np.column_stack([np.ones(len(yvec)), tfp, *dummies])
    coef, *_ = np.linalg.lstsq(X, yvec, rcond=None)
    resid = yvec - X @ coef

    n, p = X.shape
    xtx_inv = np.linalg.inv(X.T @ X)
    meat = (X * resid[:, None] ** 2).T @ X
    cov = xtx_inv @ meat @ xtx_inv * (n / max(n - p, 1))
    pi_hat = float(coef[1])
    se = float(math.sqrt(cov[1, 1]))
    scale = float(tfp.std())

    return OutcomeRegression(
        outcome=outcome_name, pi_hat=pi_hat, se=se,
        pi_hat_std=pi_hat * scale, se_std=se * scale,
        n=n, outcome_mean=float(yvec.mean()))


def write_tfp_csv(tfp_panel: TfpPanel, path) -> None:
    cols = ["exit", *GROWTH_OUTCOMES]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["firm_id", "year", "tfp", *cols])
        for i in range(len(tfp_panel)):
            cells = [tfp_panel.firm_ids[i], int(tfp_panel.years[i]),
                     format_float(tfp_panel.tfp[i])]
            for c in cols:
                v = tfp_panel.outcomes[c][i]
                cells.append("" if not np.isfinite(v) else format_float(v))
            writer.writerow(cells)
