"""Command-line interface: ``tailtreat estimate | simulate | bands``.

Exit codes: 0 success, 2 input error, 3 estimation failure, 4 inference failure.
Settings come from built-in defaults, then an optional INI file
(``--config``, section ``[tailtreat]``), then command-line flags.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import check_grid, parse_grid
from .dataset import Schema, load_csv
from .estimator import FitConfig, extract_ctate_qte, fit_profile, lorenz_effect
from .exceptions import DataError, EstimationError, InferenceError
from .inference import (BootstrapConfig, bootstrap, bootstrap_pointwise_band, estimate_weights,
                        pointwise_band, sandwich_covariance, simultaneous_band)
from .simulation import METHODS, StudyConfig, export_report, run_study

log = logging.getLogger("tailtreat")

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION, EXIT_INFERENCE = 0, 2, 3, 4

DEFAULTS = {
    "estimate": {"grid": "0.10:0.90:0.01", "weights": "projected", "degree": 2, "y_degree": 3,
                 "level": 0.95,
                 "bandwidth": None, "nuisance_correction": True, "lorenz": False,
                 "outer_tol": 1e-6, "max_outer": 100, "threads": 1, "out": "."},
    "simulate": {"n": 500, "rho": 0.0, "reps": 200, "seed": 0, "grid": "0.1:0.9:0.1",
                 "methods": ",".join(METHODS), "degree": 2, "degree_m2": 2, "full": False,
                 "threads": 1, "inference": False, "out": "."},
    "bands": {"grid": "0.10:0.90:0.01", "weights": "projected", "degree": 2, "y_degree": 3,
              "level": 0.95,
              "boot_B": 300, "seed": 0, "coef": "ctate", "outer_tol": 1e-6, "max_outer": 100,
              "threads": 1, "out": "."},
}
_BOOL_KEYS = {"nuisance_correction", "lorenz", "full", "inference"}
_INT_KEYS = {"degree", "y_degree", "degree_m2", "max_outer", "threads", "n", "reps", "seed", "boot_B"}
_FLOAT_KEYS = {"level", "bandwidth", "outer_tol", "rho"}


def _data_args(p):
    p.add_argument("--data", help="input CSV")
    p.add_argument("--y", help="outcome column (default y)")
    p.add_argument("--d", help="treatment column (default d)")
    p.add_argument("--z", help="instrument column (default z)")
    p.add_argument("--x", help="comma-separated covariate columns (default: all others)")
    p.add_argument("--grid", help="quantile grid LO:HI:STEP or comma list")
    p.add_argument("--weights", choices=["projected", "unit"])
    p.add_argument("--degree", type=int, help="total degree of the power series for E[Z|Y,D,X]")
    p.add_argument("--y-degree", dest="y_degree", type=int,
                   help="highest power of the outcome in the series (default 3)")
    p.add_argument("--level", type=float, help="confidence level (default 0.95)")
    p.add_argument("--outer-tol", dest="outer_tol", type=float)
    p.add_argument("--max-outer", dest="max_outer", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tailtreat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with a [tailtreat] section")
    common.add_argument("--threads", type=int, help="worker processes")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("estimate", parents=[common], help="QTE/CTATE profile with analytic bands")
    _data_args(p)
    p.add_argument("--bandwidth", type=float, help="Powell bandwidth override")
    p.add_argument("--no-nuisance-correction", dest="nuisance_correction", action="store_const",
                   const=False, help="ignore propensity estimation in standard errors")
    p.add_argument("--lorenz", action="store_const", const=True,
                   help="add Lorenz effects (extends the grid to 0.99)")

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo study of methods M1-M4")
    p.add_argument("--n", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--full", action="store_const", const=True, help="use 1000 replications")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid")
    p.add_argument("--methods", help="comma list from M1,M2,M3,M4")
    p.add_argument("--degree", type=int, help="M1 power-series degree")
    p.add_argument("--degree-m2", dest="degree_m2", type=int, help="M2 polynomial degree")
    p.add_argument("--inference", action="store_const", const=True,
                   help="also record analytic band coverage")

    p = sub.add_parser("bands", parents=[common], help="bootstrap pointwise and simultaneous bands")
    _data_args(p)
    p.add_argument("--boot-B", dest="boot_B", type=int, help="bootstrap replications (default 300)")
    p.add_argument("--seed", type=int)
    p.add_argument("--coef", choices=["ctate", "qte"])
    return parser


def _coerce(key, value):
    if value is None or not isinstance(value, str):
        return value
    if key in _BOOL_KEYS:
        return value.strip().lower() in {"1", "true", "yes", "on"}
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    return value


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < INI file < command-line flags."""
    cfg = dict(DEFAULTS[args.command])
    cfg.update({"y": "y", "d": "d", "z": "z", "x": None, "data": None})
    if args.config:
        ini = configparser.ConfigParser()
        if not ini.read(args.config):
            raise DataError(f"cannot read config file {args.config}")
        for section in ("tailtreat", args.command):
            if ini.has_section(section):
                for k, v in ini.items(section):
                    cfg[k.replace("-", "_")] = _coerce(k.replace("-", "_"), v)
    for k, v in vars(args).items():
        if k in {"command", "config", "verbose"} or v is None:
            continue
        cfg[k] = v
    cfg["command"] = args.command
    return cfg


def _schema(cfg) -> Schema:
    return Schema.from_mapping({"y": cfg["y"], "d": cfg["d"], "z": cfg["z"], "x": cfg["x"]})


def _provenance(cfg) -> list[str]:
    return [f"tailtreat {__version__}", "config: " + json.dumps(cfg, sort_keys=True, default=str)]


def _write_csv(path: Path, header, rows, cfg):
    with path.open("w", newline="", encoding="utf-8") as fh:
        for line in _provenance(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return v


def _fit_config(cfg) -> FitConfig:
    return FitConfig(outer_tol=float(cfg["outer_tol"]), max_outer=int(cfg["max_outer"]),
                     n_jobs=int(cfg["threads"]))


def _load(cfg):
    if not cfg.get("data"):
        raise DataError("--data is required")
    return load_csv(cfg["data"], _schema(cfg))


def cmd_estimate(cfg: dict) -> int:
    ds = _load(cfg)
    grid = parse_grid(str(cfg["grid"]))
    if cfg["lorenz"] and grid[-1] < 0.99:
        grid = check_grid(np.append(grid, 0.99))
    cfg["resolved_grid"] = grid.tolist()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    weights = estimate_weights(ds, cfg["weights"], int(cfg["degree"]), int(cfg["y_degree"]))
    profile = fit_profile(ds, weights, grid, _fit_config(cfg))
    if len(profile.errors) == len(grid):
        raise EstimationError(f"estimation failed at every level: {profile.errors}")

    covs, inference_errors = [], {}
    for j, fit in enumerate(profile.fits):
        if fit is None:
            covs.append(None)
            continue
        try:
            covs.append(sandwich_covariance(ds, weights, weights.probit, fit, cfg["bandwidth"],
                                            correct_nuisance=bool(cfg["nuisance_correction"])))
        except InferenceError as exc:
            covs.append(None)
            inference_errors[float(grid[j])] = str(exc)
    if all(c is None for c in covs):
        raise InferenceError(f"covariance estimation failed at every level: {inference_errors}")
    level = float(cfg["level"])
    pcb_q = pointwise_band(profile, covs, level, "qte")
    pcb_c = pointwise_band(profile, covs, level, "ctate")

    names = ["d", "const", *ds.covariate_names]
    k = len(names)
    header = ["tau", "qte", "ctate",
              *[f"theta1_{nm}" for nm in names], *[f"theta2_{nm}" for nm in names],
              *[f"se_theta1_{nm}" for nm in names], *[f"se_theta2_{nm}" for nm in names],
              "pcb_qte_lo", "pcb_qte_hi", "pcb_ctate_lo", "pcb_ctate_hi"]
    if cfg["lorenz"]:
        header.append("lorenz_effect")
    table = extract_ctate_qte(profile)
    rows = []
    for j, tau in enumerate(grid):
        fit, c = profile.fits[j], covs[j]
        coef = fit.stacked if fit is not None else np.full(2 * k, np.nan)
        se = c.se if c is not None else np.full(2 * k, np.nan)
        row = [float(tau), table["qte"][j], table["ctate"][j], *coef, *se,
               pcb_q.lower[j], pcb_q.upper[j], pcb_c.lower[j], pcb_c.upper[j]]
        if cfg["lorenz"]:
            try:
                row.append(lorenz_effect(profile, float(tau)))
            except (EstimationError, ZeroDivisionError):
                row.append(float("nan"))
        rows.append(row)
    _write_csv(out / "estimates.csv", header, rows, cfg)

    run = {
        "version": __version__,
        "config": cfg,
        "n": ds.n,
        "weights": weights.summary(),
        "diagnostics": {str(float(t)): (d.as_dict() if d is not None else None)
                        for t, d in zip(grid, profile.diagnostics)},
        "cte_above_quantile": {str(float(t)): (d.cte_above_quantile_count if d is not None else None)
                               for t, d in zip(grid, profile.diagnostics)},
        "estimation_errors": {str(float(grid[j])): e for j, e in profile.errors.items()},
        "inference_errors": {str(t): e for t, e in inference_errors.items()},
    }
    if weights.probit is not None:
        run["probit"] = {"gamma": weights.probit.gamma.tolist(),
                         "iterations": weights.probit.iterations}
    (out / "run.json").write_text(json.dumps(run, indent=2, default=str))
    log.info("wrote %s and %s", out / "estimates.csv", out / "run.json")
    return EXIT_OK if not profile.errors else EXIT_ESTIMATION


def cmd_simulate(cfg: dict) -> int:
    grid = parse_grid(str(cfg["grid"]))
    methods = tuple(m.strip().upper() for m in str(cfg["methods"]).split(",") if m.strip())
    for m in methods:
        if m not in METHODS:
            raise DataError(f"unknown method {m!r}")
    reps = 1000 if cfg["full"] else int(cfg["reps"])
    study = StudyConfig(n=int(cfg["n"]), rho=float(cfg["rho"]), R=reps,
                        grid=tuple(grid.tolist()), methods=methods, seed=int(cfg["seed"]),
                        degrees={"M1": int(cfg["degree"]), "M2": int(cfg["degree_m2"])},
                        threads=int(cfg["threads"]), inference=bool(cfg["inference"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    report = run_study(study)
    path = export_report(report, out / "report.csv", out / "report.json")
    meta = json.loads((out / "report.json").read_text())
    meta["cli_config"] = cfg
    (out / "report.json").write_text(json.dumps(meta, indent=2, default=str))
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_bands(cfg: dict) -> int:
    ds = _load(cfg)
    grid = parse_grid(str(cfg["grid"]))
    level = float(cfg["level"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    fitcfg = FitConfig(outer_tol=float(cfg["outer_tol"]), max_outer=int(cfg["max_outer"]))
    weights = estimate_weights(ds, cfg["weights"], int(cfg["degree"]), int(cfg["y_degree"]))
    profile = fit_profile(ds, weights, grid, fitcfg)
    if profile.errors:
        raise EstimationError(f"estimation failed: {profile.errors}")
    bcfg = BootstrapConfig(B=int(cfg["boot_B"]), seed=int(cfg["seed"]), grid=tuple(grid.tolist()),
                           weighting=cfg["weights"], degree=int(cfg["degree"]),
                           y_degree=int(cfg["y_degree"]),
                           threads=int(cfg["threads"]), fit=fitcfg)
    boot = bootstrap(ds, bcfg)
    pcb = bootstrap_pointwise_band(profile, boot, cfg["coef"], level)
    scb = simultaneous_band(profile, boot, cfg["coef"], level)
    rows = [[float(t), pcb.center[j], pcb.lower[j], pcb.upper[j], scb.lower[j], scb.upper[j]]
            for j, t in enumerate(grid)]
    _write_csv(out / "bands.csv", ["tau", "center", "pcb_lo", "pcb_hi", "scb_lo", "scb_hi"], rows, cfg)
    meta = {"version": __version__, "config": cfg, "B_requested": boot.requested, "B_used": boot.B,
            "failures": boot.failures, "seeds": list(boot.seeds)}
    (out / "bands.json").write_text(json.dumps(meta, indent=2, default=str))
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "bands": cmd_bands}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (DataError, ValueError) as exc:
        print(f"tailtreat: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EstimationError as exc:
        print(f"tailtreat: estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except InferenceError as exc:
        print(f"tailtreat: inference failed: {exc}", file=sys.stderr)
        return EXIT_INFERENCE


if __name__ == "__main__":
    sys.exit(main())
