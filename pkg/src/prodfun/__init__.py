"""Production-function estimation from firm panels with subjective
expectations data.

Modules:

* ``datamodel`` — panel containers, validation, CSV round trips
* ``splines`` — B-spline bases and penalties
* ``scam`` — monotone penalized spline regression
* ``npr`` — the expectation-based backfitting estimator and its
  bias-robust variants
* ``baselines`` — OLS/OP/LP/ACF comparison estimators
* ``mcsim`` — simulated firm panels and the replication harness
* ``beliefs`` — lognormal belief fitting from scenario surveys
* ``tfp`` — productivity residuals and firm-outcome regressions
* ``cli`` — the ``prodfun`` command-line driver
"""

from .datamodel import (BeliefDistribution, EstimationResult, FirmYear, Panel,
                        PanelError, ProductionSpec, read_panel_csv,
                        write_panel_csv)
from .mcsim import DgpConfig, SimPanel, scenario_config, simulate
from .npr import NprConfig, npr_fit

__all__ = [
    "BeliefDistribution", "DgpConfig", "EstimationResult", "FirmYear",
    "NprConfig", "Panel", "PanelError", "ProductionSpec", "SimPanel",
    "npr_fit", "read_panel_csv", "scenario_config", "simulate",
    "write_panel_csv",
]

__version__ = "0.1.0"
