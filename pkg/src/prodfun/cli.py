"""Command-line driver tying the package together.

Subcommands cover simulation (``simulate``), single-panel estimation
(``estimate``), replication studies (``montecarlo``), survey belief fitting
(``fit-beliefs``), synthetic survey generation (``gen-survey``), and TFP
outcome analysis (``tfp``).

Conventions shared by every subcommand:

* settings resolve as flags > ``--config`` JSON file > built-in defaults;
  the config file is a single JSON object whose recognized keys depend on
  the subcommand (unknown keys are rejected so typos fail loudly);
* outputs are deterministic given (inputs, seed); ``--threads`` changes
  wall time only, never numbers;
* structured results are JSON, tables are CSV, and every float is written
  with 17 significant digits so the exact doubles can be reconstructed;
  non-finite floats appear as JSON ``null``;
* exit codes: 0 success; 1 the estimator did not converge (results are
  still written, with the convergence flag set); 2 usage, config, or input
  errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines, beliefs, npr, tfp
from .datamodel import (Panel, ProductionSpec, format_float, read_panel_csv,
                        write_panel_csv)
from .mcsim import DgpConfig, SCENARIOS, run_replications, scenario_config, simulate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_USAGE = 2

#: command-line estimator tokens -> registry names used by the harness
ESTIMATOR_TOKENS = {
    "npr": "NPR",
    "npr-bias-inv": "NPR_BiasInvariant",
    "npr-bias-cov": "NPR_BiasCovariate",
    "wald": "Wald",
    "ols": "OLS",
    "ols-fd": "OLS_FD",
    "ols-fe": "OLS_FE",
    "op": "OP",
    "lp": "LP",
    "acf": "ACF",
}

#: methods accepted by `estimate` (superset of ESTIMATOR_TOKENS: translog
#: has no replication-harness row)
ESTIMATE_METHODS = ("npr", "npr-translog", "npr-bias-cov", "wald", "ols",
                    "ols-fd", "ols-fe", "op", "lp", "acf")


class CliError(Exception):
    """Usage or configuration problem; maps to exit code 2."""


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def render_json(obj, indent: int = 0) -> str:
    """JSON with floats at 17 significant digits (NaN/inf become null)."""
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        cells = [f"{pad}  {json.dumps(str(k))}: {render_json(v, indent + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(cells) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if len(obj) == 0:
            return "[]"
        cells = [f"{pad}  {render_json(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(cells) + f"\n{pad}]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format_float(x) if math.isfinite(x) else "null"
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(render_json(payload) + "\n")


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _load_config(path: Path | None, allowed: set[str]) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}")
    except json.JSONDecodeError as exc:
        raise CliError(f"config file is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise CliError("config file must hold a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        raise CliError(f"unknown config keys {sorted(unknown)}; "
                       f"this command accepts {sorted(allowed)}")
    return doc


def _setting(flag_value, doc: dict, key: str, default=None):
    """flags > config file > default."""
    if flag_value is not None:
        return flag_value
    return doc.get(key, default)


def _dgp_config(args, doc: dict) -> DgpConfig:
    seed = _setting(args.seed, doc, "seed")
    if seed is None:
        raise CliError("a seed is required (--seed or config key 'seed')")
    scenario = _setting(getattr(args, "scenario", None), doc, "scenario")
    overrides = dict(doc.get("dgp", {}))
    overrides["seed"] = int(seed)
    try:
        if scenario is not None:
            return scenario_config(scenario, **overrides)
        return DgpConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid simulation settings: {exc}")


def _npr_config(section: dict) -> npr.NprConfig:
    kwargs = dict(section)
    if "init_grid" in kwargs:
        kwargs["init_grid"] = tuple(tuple(float(x) for x in point)
                                    for point in kwargs["init_grid"])
    try:
        return npr.NprConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid npr settings: {exc}")


def _proxy_config(section: dict) -> baselines.ProxyConfig:
    try:
        return baselines.ProxyConfig(**section)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid proxy settings: {exc}")


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ensure_distinct(inputs: list[Path], outputs: list[Path]) -> None:
    taken = {p.resolve() for p in inputs}
    clash = [str(p) for p in outputs if p.resolve() in taken]
    if clash:
        raise CliError(f"output would overwrite an input: {', '.join(clash)}")


# ---------------------------------------------------------------------------
# shared result shaping
# ---------------------------------------------------------------------------

def crs_pvalue(beta_l: float, beta_k: float,
               se_l: float | None, se_k: float | None) -> float | None:
    """Two-sided p-value for constant returns to scale (beta_l + beta_k = 1).

    Delta method on the sum; the coefficient covariance is not retained by
    the estimators, so the variance uses the independence approximation
    se_l^2 + se_k^2. Returns None when either standard error is missing.
    """
    if se_l is None or se_k is None:
        return None
    var = float(se_l) ** 2 + float(se_k) ** 2
    if not var > 0 or not math.isfinite(var):
        return None
    z = (beta_l + beta_k - 1.0) / math.sqrt(var)
    return math.erfc(abs(z) / math.sqrt(2.0))


def _results_payload(res, dropped_on_read: dict, extra: dict | None = None) -> dict:
    ses = dict(res.std_errors or {})
    payload = {
        "method": res.method,
        "family": res.spec.family,
        "coefficients": res.spec.coef_dict(),
        "year_effects": {str(y): v for y, v in sorted(res.spec.year_effects.items())},
        "std_errors": ses,
        "returns_to_scale": res.spec.beta_l + res.spec.beta_k,
        "crs_pvalue": crs_pvalue(res.spec.beta_l, res.spec.beta_k,
                                 ses.get("beta_l"), ses.get("beta_k")),
        "converged": res.converged,
        "iterations": res.iterations,
        "objective": res.objective,
        "n_obs": res.n_obs,
        "n_firms": res.n_firms,
        "dropped_on_read": dict(dropped_on_read),
        "dropped_in_estimation": dict(res.extra.get("dropped", {})),
    }
    if extra:
        payload.update(extra)
    return payload


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    doc = _load_config(args.config, {"seed", "scenario", "dgp"})
    cfg = _dgp_config(args, doc)
    out = _out_dir(args)
    sim = simulate(cfg)
    write_panel_csv(sim.panel, out / "panel.csv")
    sim.write_truth_csv(out / "truth.csv")
    print(f"wrote {out / 'panel.csv'} and {out / 'truth.csv'} "
          f"({len(sim.panel)} firm-years)")
    return EXIT_OK


def _run_estimator(method: str, panel: Panel, doc: dict):
    """Dispatch one estimate; returns (result, payload extras)."""
    npr_cfg = _npr_config(doc.get("npr", {}))
    proxy_cfg = _proxy_config(doc.get("proxy", {}))
    covariates = doc.get("covariates", ["mgmt"])
    if method == "npr":
        return npr.npr_fit(panel, npr_cfg), None
    if method == "npr-translog":
        return npr.npr_fit(panel, replace(npr_cfg, family="translog")), None
    if method == "npr-bias-cov":
        res, lam = npr.npr_bias_covariate(panel, covariates, npr_cfg)
        lam = np.asarray(lam, dtype=float).ravel()
        names = ["intercept", *covariates]
        return res, {"bias_loadings": dict(zip(names, map(float, lam)))}
    if method == "wald":
        return npr.wald_beta_l(panel), None
    if method == "ols":
        return baselines.ols_levels(panel), None
    if method == "ols-fd":
        return baselines.ols_fd(panel), None
    if method == "ols-fe":
        return baselines.ols_fe(panel), None
    if method == "op":
        return baselines.op_fit(panel, proxy_cfg), None
    if method == "lp":
        return baselines.lp_fit(panel, proxy_cfg), None
    if method == "acf":
        start = doc.get("acf_start")
        if start is not None:
            start = (float(start[0]), float(start[1]))
        return baselines.acf_fit(panel, proxy_cfg, start=start), None
    raise CliError(f"unknown method {method!r}; choose from {ESTIMATE_METHODS}")


def cmd_estimate(args) -> int:
    doc = _load_config(args.config, {"method", "npr", "proxy", "covariates",
                                     "acf_start"})
    method = _setting(args.method, doc, "method")
    if method is None:
        raise CliError("a method is required (--method or config key 'method')")
    panel_path = Path(args.panel)
    out = _out_dir(args)
    _ensure_distinct([panel_path], [out / "results.json"])
    panel, dropped = read_panel_csv(panel_path)
    res, extras = _run_estimator(method, panel, doc)
    _write_json(out / "results.json", _results_payload(res, dropped, extras))
    print(f"wrote {out / 'results.json'} "
          f"(beta_l={res.spec.beta_l:.4f}, beta_k={res.spec.beta_k:.4f}, "
          f"converged={res.converged})")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_montecarlo(args) -> int:
    doc = _load_config(args.config, {"seed", "scenario", "runs", "threads",
                                     "estimators", "dgp"})
    cfg = _dgp_config(args, doc)
    runs = _setting(args.runs, doc, "runs")
    if runs is None:
        raise CliError("a run count is required (--runs or config key 'runs')")
    runs = int(runs)
    if runs < 1:
        raise CliError("--runs must be >= 1")
    threads = int(_setting(args.threads, doc, "threads", 1))
    tokens = _setting(args.estimators, doc, "estimators")
    if tokens is None:
        if cfg.bias == "eomega_mgmt":
            tokens = ["npr", "npr-bias-cov"]
        elif cfg.bias != "none":
            tokens = ["npr"]
        else:
            tokens = ["npr", "ols", "op", "lp", "acf"]
    elif isinstance(tokens, str):
        tokens = [t.strip() for t in tokens.split(",") if t.strip()]
    bad = [t for t in tokens if t not in ESTIMATOR_TOKENS]
    if bad:
        raise CliError(f"unknown estimators {bad}; "
                       f"choose from {sorted(ESTIMATOR_TOKENS)}")
    out = _out_dir(args)
    table = run_replications(cfg, runs, [ESTIMATOR_TOKENS[t] for t in tokens],
                             n_jobs=threads)
    table.write_csv(out / "summary.csv")
    print(f"wrote {out / 'summary.csv'} ({runs} runs, "
          f"estimators: {', '.join(tokens)})")
    return EXIT_OK


def cmd_fit_beliefs(args) -> int:
    survey_path = Path(args.survey)
    out = _out_dir(args)
    _ensure_distinct([survey_path],
                     [out / "beliefs.csv", out / "diagnostics.csv"])
    rows = beliefs.read_survey_csv(survey_path)
    if not rows:
        raise CliError(f"survey file {survey_path} has no data rows")

    import csv as _csv
    fitted: dict[str, list[float]] = {}
    discarded: dict[str, int] = {}
    with open(out / "beliefs.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["firm_id", "year", "variable", "mu", "sigma2", "mad",
                    "degenerate"])
        for row in rows:
            try:
                fit = beliefs.fit_belief(beliefs.normalize_likelihoods(row.response))
            except beliefs.SurveyError as exc:
                logger.warning("discarding %s/%s/%s: %s",
                               row.firm_id, row.year, row.variable, exc)
                discarded[row.variable] = discarded.get(row.variable, 0) + 1
                continue
            fitted.setdefault(row.variable, []).append(fit.mad)
            w.writerow([row.firm_id, row.year, row.variable,
                        format_float(fit.mu), format_float(fit.sigma2),
                        format_float(fit.mad), int(fit.degenerate)])

    with open(out / "diagnostics.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["variable", "n_fitted", "n_discarded",
                    "mean_mad", "p25_mad", "median_mad", "p75_mad"])
        for var in sorted(set(fitted) | set(discarded)):
            mads = np.array(fitted.get(var, []))
            cells = [var, len(mads), discarded.get(var, 0)]
            if len(mads):
                cells += [format_float(x) for x in
                          (mads.mean(), *np.percentile(mads, [25, 50, 75]))]
            else:
                cells += ["", "", "", ""]
            w.writerow(cells)
    n_fit = sum(len(v) for v in fitted.values())
    print(f"wrote {out / 'beliefs.csv'} ({n_fit} fits, "
          f"{sum(discarded.values())} discarded) and {out / 'diagnostics.csv'}")
    return EXIT_OK


def cmd_gen_survey(args) -> int:
    doc = _load_config(args.config, {"seed", "n", "gen"})
    seed = int(_setting(args.seed, doc, "seed", 0))
    n = int(_setting(args.n, doc, "n", 100))
    if n < 0:
        raise CliError("--n must be >= 0")
    gen = doc.get("gen", {})
    year = int(gen.get("year", 2020))
    variables = list(gen.get("variables", sorted(beliefs.SURVEY_VARIABLES)))
    bad = [v for v in variables if v not in beliefs.SURVEY_VARIABLES]
    if bad:
        raise CliError(f"unknown survey variables {bad}; "
                       f"choose from {sorted(beliefs.SURVEY_VARIABLES)}")
    mu_low, mu_high = (float(gen.get("mu_low", 1.0)),
                       float(gen.get("mu_high", 3.0)))
    sigma_low, sigma_high = (float(gen.get("sigma_low", 0.05)),
                             float(gen.get("sigma_high", 0.6)))
    if not (mu_low <= mu_high and 0 < sigma_low <= sigma_high):
        raise CliError("generator ranges must satisfy mu_low <= mu_high and "
                       "0 < sigma_low <= sigma_high")

    out = _out_dir(args)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    rows, truth = [], []
    width = max(len(str(n - 1)), 1) if n else 1
    for i in range(n):
        firm = f"s{i:0{width}d}"
        for var in variables:
            mu = float(rng.uniform(mu_low, mu_high))
            sigma = float(rng.uniform(sigma_low, sigma_high))
            rows.append(beliefs.SurveyResponseRow(
                firm_id=firm, year=year, variable=var,
                response=beliefs.synthetic_response(mu, sigma)))
            truth.append((firm, year, var, mu, sigma * sigma))
    beliefs.write_survey_csv(rows, out / "survey.csv")

    import csv as _csv
    with open(out / "survey_truth.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["firm_id", "year", "variable", "mu", "sigma2"])
        for firm, yr, var, mu, s2 in truth:
            w.writerow([firm, yr, var, format_float(mu), format_float(s2)])
    print(f"wrote {out / 'survey.csv'} and {out / 'survey_truth.csv'} "
          f"({n} firms x {len(variables)} variables)")
    return EXIT_OK


def _load_production_spec(path: Path) -> ProductionSpec:
    if not path.exists():
        raise CliError(f"coefficient file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"coefficient file is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise CliError("coefficient file must hold a JSON object")
    coefs = doc.get("coefficients", doc)
    family = doc.get("family", coefs.get("family", "cobb_douglas"))
    missing = [k for k in ("beta_l", "beta_k") if k not in coefs]
    if missing:
        raise CliError(f"coefficient file lacks {missing}")
    beta0 = coefs.get("beta0", 0.0)
    if beta0 is None or not math.isfinite(float(beta0)):
        beta0 = 0.0  # intercept is absorbed by year demeaning anyway
    kwargs = {}
    if family == "translog":
        kwargs = {k: float(coefs.get(k, 0.0))
                  for k in ("beta_l2", "beta_k2", "beta_lk")}
    try:
        return ProductionSpec(family=family, beta0=float(beta0),
                              beta_l=float(coefs["beta_l"]),
                              beta_k=float(coefs["beta_k"]), **kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid coefficients: {exc}")


def cmd_tfp(args) -> int:
    panel_path = Path(args.panel)
    spec = _load_production_spec(Path(args.coefficients))
    out = _out_dir(args)
    _ensure_distinct([panel_path, Path(args.coefficients)],
                     [out / "tfp.csv", out / "regressions.json"])
    panel, dropped = read_panel_csv(panel_path)
    tfp_panel = tfp.tfp_residuals(panel, spec)
    tfp.write_tfp_csv(tfp_panel, out / "tfp.csv")

    year_mean = {}
    years = np.asarray(tfp_panel.years)
    for yr in np.unique(years):
        year_mean[int(yr)] = float(tfp_panel.tfp[years == yr].mean())
    outcomes = {}
    for name in ("exit", *tfp.GROWTH_OUTCOMES):
        try:
            reg = tfp.outcome_regression(tfp_panel, name)
        except ValueError as exc:
            outcomes[name] = {"error": str(exc)}
            continue
        outcomes[name] = {
            "pi_hat": reg.pi_hat, "se": reg.se,
            "pi_hat_std": reg.pi_hat_std, "se_std": reg.se_std,
            "n": reg.n, "outcome_mean": reg.outcome_mean,
        }
    payload = {
        "family": spec.family,
        "coefficients_used": spec.coef_dict(),
        "n_obs": len(tfp_panel.tfp),
        "dropped_on_read": dict(dropped),
        "max_abs_year_mean_tfp": max(abs(v) for v in year_mean.values()),
        "outcomes": outcomes,
    }
    _write_json(out / "regressions.json", payload)
    print(f"wrote {out / 'tfp.csv'} and {out / 'regressions.json'} "
          f"({len(tfp_panel.tfp)} firm-years)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prodfun",
        description="Production-function estimation from firm panels and "
                    "subjective expectations data.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, *, config=True, seed=False, out=True):
        if config:
            sp.add_argument("--config", type=Path, metavar="PATH",
                            help="JSON settings file; flags override it")
        if seed:
            sp.add_argument("--seed", type=int, metavar="N")
        if out:
            sp.add_argument("--out", type=Path, metavar="DIR",
                            help="output directory (default: current)")

    sp = sub.add_parser("simulate", help="write panel.csv and truth.csv "
                                         "for one simulated panel")
    sp.add_argument("--scenario", choices=sorted(SCENARIOS))
    common(sp, seed=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("estimate", help="fit one estimator to a panel CSV; "
                                         "writes results.json")
    sp.add_argument("panel", type=Path, help="panel CSV path")
    sp.add_argument("--method", choices=ESTIMATE_METHODS)
    common(sp)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("montecarlo", help="replicate estimators over "
                                           "simulated panels; writes summary.csv")
    sp.add_argument("--scenario", choices=sorted(SCENARIOS))
    sp.add_argument("--runs", type=int, metavar="N")
    sp.add_argument("--estimators", metavar="LIST",
                    help="comma-separated tokens, e.g. npr,ols,acf")
    sp.add_argument("--threads", type=int, metavar="N")
    common(sp, seed=True)
    sp.set_defaults(func=cmd_montecarlo)

    sp = sub.add_parser("fit-beliefs", help="fit lognormal beliefs to a "
                                            "scenario survey CSV")
    sp.add_argument("survey", type=Path, help="survey CSV path")
    common(sp, config=False)
    sp.set_defaults(func=cmd_fit_beliefs)

    sp = sub.add_parser("gen-survey", help="generate a synthetic survey "
                                           "with known lognormal truths")
    sp.add_argument("--n", type=int, metavar="N",
                    help="number of firms (default 100)")
    common(sp, seed=True)
    sp.set_defaults(func=cmd_gen_survey)

    sp = sub.add_parser("tfp", help="TFP residuals and outcome regressions "
                                    "from a panel and fitted coefficients")
    sp.add_argument("panel", type=Path, help="panel CSV path")
    sp.add_argument("--coefficients", type=Path, required=True, metavar="PATH",
                    help="results.json from `estimate`, or a plain "
                         "coefficient JSON object")
    common(sp, config=False)
    sp.set_defaults(func=cmd_tfp)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # input/data problems surface as exit 2
        logger.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
