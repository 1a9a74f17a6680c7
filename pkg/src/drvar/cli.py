"""Command-line front end.

Every invocation writes into its own run directory together with a
``manifest.json`` recording arguments, input hashes, seeds, library versions
and wall-clock time. Failures print one line to stderr::

    drvar: error code=<code> exit=<status>: <message>

with exit status 2 (usage), 3 (data) or 4 (numerical).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import DRVARError, UsageError
from .estimation import PENALTIES, fit_drvar, fit_metrics, forecast, select_lag, select_rank
from .factor_space import DEFAULT_P0, ly_rank, m_matrix
from .montecarlo import (
    calibrated_model,
    grid_from_config,
    run_cell,
    run_model_cell,
    synthetic_macro_panel,
    write_reports_csv,
    write_reports_json,
)
from .panel import clean_outliers, load_panel, standardize, transform_panel, write_panel
from .persistence import load_model, save_model
from .structural import (
    DEFAULT_GRID,
    DEFAULT_H,
    band_from_periods,
    bootstrap_se,
    common_component_ma,
    irf,
    mbccc_series,
    mbccs_identification,
    nu_contributions,
    recursive_identification,
    variance_contributions,
    write_irf_csv,
    write_series_csv,
    write_shares_csv,
    write_spectrum_csv,
)

logger = logging.getLogger("drvar")

FIXTURE_NAME = "synthetic_macro.csv"


def bundled_fixture() -> Path:
    """Path of the bundled 242 x 211 synthetic raw panel (true r = 3)."""
    return Path(__file__).parent / "data" / FIXTURE_NAME


# ----------------------------------------------------------------------------
# run directory and manifest


class Run:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.t0 = time.perf_counter()
        if args.run_dir:
            self.dir = Path(args.run_dir)
        else:
            stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
            self.dir = Path(args.out) / f"{command}_{stamp}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.inputs = {}
        self.outputs = []
        self.seeds = {}
        self.results = {}

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def add_input(self, path) -> None:
        p = Path(path)
        self.inputs[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()

    def write_manifest(self) -> None:
        params = {k: v for k, v in vars(self.args).items() if k != "func"}
        doc = {
            "command": self.command,
            "parameters": params,
            "inputs": self.inputs,
            "seeds": self.seeds,
            "outputs": sorted(self.outputs),
            "results": self.results,
            "versions": {
                "drvar": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "wall_clock_seconds": round(time.perf_counter() - self.t0, 3),
        }
        (self.dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_panel(run: Run, path):
    run.add_input(path)
    panel = load_panel(path)
    if panel.flagged:
        panel = panel.drop_flagged()
    return panel


def _check_positive(name, value, minimum=1):
    if value is not None and value < minimum:
        raise UsageError(f"--{name.replace('_', '-')} must be at least {minimum}, got {value}")


# ----------------------------------------------------------------------------
# subcommands


def _transform(panel, run: Run, args):
    if panel.tcodes is not None and not args.no_tcodes:
        panel = transform_panel(panel)
    if args.clean is not None:
        panel, report = clean_outliers(panel, k=args.clean)
        with run.path("cleaning.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", "row", "original", "replacement"])
            for name, row, orig, new in report.rows():
                w.writerow([name, row, repr(orig), repr(new)])
        for msg in report.warnings:
            logger.warning(msg)
        run.results["cleaning"] = {"series_touched": report.series_touched,
                                   "points_replaced": report.points_replaced,
                                   "warnings": report.warnings}
    if not args.no_standardize:
        panel = standardize(panel)
    return panel


def cmd_transform(args, run: Run):
    panel = _read_panel(run, args.input)
    out = _transform(panel, run, args)
    write_panel(out, run.path("panel.csv"))
    run.results["shape"] = [out.T, out.n]


def _select(panel, run: Run, args):
    fs = m_matrix(panel, p0=args.p0, R=min(args.R + 1, panel.n))
    fs.write_scree(run.path("scree.csv"))
    R = min(args.R, panel.n - 1)
    ly = ly_rank(fs.eigenvalues, R)
    table = select_rank(panel, p=args.p, R=R, method=args.method, factor_space=fs)
    table.write_csv(run.path("ic_table.csv"))
    summary = {"LY": ly, **table.chosen}
    if args.pmax:
        lags = select_lag(panel, fs.vectors[:, :R], args.pmax)
        lags.write_csv(run.path("lag_table.csv"))
        summary["lag"] = lags.chosen
    _write_json(run.path("selection.json"), summary)
    run.results["selection"] = summary
    return summary


def cmd_select(args, run: Run):
    _check_positive("R", args.R)
    _check_positive("p", args.p)
    summary = _select(_read_panel(run, args.input), run, args)
    print(json.dumps(summary, sort_keys=True))


def cmd_fit(args, run: Run):
    _check_positive("r", args.r)
    _check_positive("p", args.p)
    panel = _read_panel(run, args.input)
    model = fit_drvar(panel, args.r, args.p, method=args.method, p0=args.p0)
    save_model(model, run.path("model.json"))
    run.results["companion_radius"] = model.companion_radius()
    if args.method == "fgls":
        run.results["fgls"] = {k: model.meta[k] for k in ("iterations", "converged")}


def cmd_forecast(args, run: Run):
    _check_positive("k", args.k)
    run.add_input(args.model)
    model = load_model(args.model)
    panel = _read_panel(run, args.input)
    if panel.n != model.n:
        raise UsageError(f"panel has {panel.n} series, model expects {model.n}")
    fc = forecast(model, panel.data[-model.p:], args.k, original_units=args.original_units)
    names = list(model.names or panel.names)
    with run.path("forecast.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + names)
        for h, row in enumerate(fc, start=1):
            w.writerow([h] + [repr(float(v)) for v in row])


def _structural(model, panel, run: Run, args):
    band = band_from_periods(*args.band)
    dec = common_component_ma(model, panel, H=args.H)
    run.results["tail_mass"] = dec.tail_mass()
    names = list(dec.names) if dec.names is not None else None
    write_spectrum_csv(dec, run.path("spectrum.csv"))
    metrics = fit_metrics(model, panel, dec)
    with run.path("fit_metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "R2_YZ", "R2_YXi"])
        for j in range(model.n):
            w.writerow([names[j] if names else j + 1, repr(float(metrics.r2_yz[j])),
                        repr(float(metrics.r2_yxi[j]))])
    run.results["fit_metrics"] = metrics.summary()

    if args.scheme == "mbccs":
        ident = mbccs_identification(dec, band, args.grid_points)
        write_shares_csv(ident, run.path("theta_shares.csv"))
        run.results["leading_share"] = float(ident.shares[0])
    else:
        ident = recursive_identification(dec)
    contrib = variance_contributions(ident, dec, band, args.shock - 1, args.grid_points)
    label = f"{min(args.band):g}-{max(args.band):g}"
    contrib.write_csv(run.path("contributions.csv"), label=label)
    nu_band, nu_zero = nu_contributions(dec, band, args.grid_points)
    with run.path("nu_contributions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period"] + (names or [f"y{j + 1}" for j in range(model.n)]))
        w.writerow([label] + [f"{100 * v:.1f}" for v in nu_band])
        w.writerow(["inf"] + [f"{100 * v:.1f}" for v in nu_zero])

    resp = irf(ident, dec, args.shock - 1, args.horizons)
    cum = irf(ident, dec, args.shock - 1, args.horizons, cumulate=True)
    lo = hi = clo = chi = None
    if args.bootstrap:
        if args.scheme != "mbccs" or args.shock != 1:
            raise UsageError("bootstrap bands are computed for the first mbccs shock only")
        run.seeds["bootstrap"] = args.seed
        boot = bootstrap_se(model, panel, B=args.bootstrap, seed=args.seed, H=args.H, band=band,
                            horizons=args.horizons, grid_points=args.grid_points)
        lo, hi = boot.lower["irf"], boot.upper["irf"]
        clo, chi = boot.lower["irf_cum"], boot.upper["irf_cum"]
        run.results["bootstrap"] = {"replicates": boot.replicates, "failures": boot.failures}
        with run.path("contributions_se.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["period"] + (names or [f"y{j + 1}" for j in range(model.n)]))
            w.writerow([label] + [f"{100 * v:.1f}" for v in boot.se["band"]])
            w.writerow(["inf"] + [f"{100 * v:.1f}" for v in boot.se["zero"]])
    write_irf_csv(resp, run.path("irf.csv"), names, lo, hi)
    if args.emit_plot_data:
        write_irf_csv(cum, run.path("irf_cumulated.csv"), names, clo, chi)
        if args.scheme == "mbccs":
            write_series_csv(mbccc_series(ident, dec), run.path("mbccc.csv"), dec.dates)


def cmd_structural(args, run: Run):
    _check_positive("H", args.H)
    _check_positive("horizons", args.horizons)
    run.add_input(args.model)
    model = load_model(args.model)
    panel = _read_panel(run, args.input)
    if panel.n != model.n:
        raise UsageError(f"panel has {panel.n} series, model expects {model.n}")
    _structural(model, panel, run, args)


def cmd_pipeline(args, run: Run):
    """transform, select, fit with the chosen rank and run the structural stage."""
    source = args.input or bundled_fixture()
    panel = _transform(_read_panel(run, source), run, args)
    write_panel(panel, run.path("panel.csv"))
    summary = _select(panel, run, args)
    r = args.r or summary[args.criterion]
    if args.pmax and not args.p_fixed:
        args.p = summary["lag"][args.criterion]
    run.results["chosen"] = {"r": r, "p": args.p}
    model = fit_drvar(panel, r, args.p, method=args.method, p0=args.p0)
    save_model(model, run.path("model.json"))
    _structural(model, panel, run, args)
    print(json.dumps(run.results["chosen"], sort_keys=True))


def cmd_mc(args, run: Run):
    run.seeds["base"] = args.seed
    if args.design == "calibrated":
        model = calibrated_model()
        reports = [run_model_cell(model, args.T, args.reps or 100, seed=args.seed, estimator=args.method,
                                  R=args.R, n_jobs=args.jobs)]
    else:
        if not args.grid:
            raise UsageError("mc needs --grid CONFIG.json or --design calibrated")
        run.add_input(args.grid)
        try:
            doc = json.loads(Path(args.grid).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.grid}: invalid JSON ({exc.msg})") from None
        reports = []
        for i, (cfg, reps) in enumerate(grid_from_config(doc, seed=args.seed)):
            reps = args.reps or reps
            reports.append(run_cell(cfg, reps, estimator=args.method, R=args.R, cell=i, n_jobs=args.jobs))
    write_reports_csv(reports, run.path("report.csv"))
    write_reports_json(reports, run.path("report.json"))
    run.results["failures"] = sum(r.failures for r in reports)


def cmd_fixture(args, run: Run):
    run.seeds["fixture"] = args.seed
    panel, _ = synthetic_macro_panel(n=args.n, T=args.T, r=args.r, seed=args.seed)
    target = Path(args.path) if args.path else run.path(FIXTURE_NAME)
    write_panel(panel, target)
    if args.path:
        run.results["written"] = str(target)


# ----------------------------------------------------------------------------
# argument parsing


def _common(p):
    p.add_argument("--out", default="runs", help="parent directory for run directories")
    p.add_argument("--run-dir", help="explicit run directory (overrides --out)")
    p.add_argument("--config", help="JSON file of default option values; flags override it")


def _transform_opts(p):
    p.add_argument("--clean", type=float, nargs="?", const=10.0, default=None,
                   help="replace outliers beyond K interquartile ranges (default K=10)")
    p.add_argument("--no-tcodes", action="store_true", help="ignore transformation codes")
    p.add_argument("--no-standardize", action="store_true")


def _select_opts(p):
    p.add_argument("--p0", type=int, default=DEFAULT_P0)
    p.add_argument("--R", type=int, default=14)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--pmax", type=int, default=0, help="also tabulate VAR order selection up to PMAX")
    p.add_argument("--method", choices=("ols", "fgls"), default="ols")


def _structural_opts(p):
    p.add_argument("--band", type=float, nargs=2, default=[6.0, 32.0], metavar=("SHORT", "LONG"),
                   help="band in periods (default 6 32)")
    p.add_argument("--scheme", choices=("mbccs", "recursive"), default="mbccs")
    p.add_argument("--shock", type=int, default=1, help="1-based shock index")
    p.add_argument("--H", type=int, default=DEFAULT_H)
    p.add_argument("--grid-points", type=int, default=DEFAULT_GRID)
    p.add_argument("--horizons", type=int, default=21)
    p.add_argument("--bootstrap", type=int, default=0, metavar="B")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emit-plot-data", action="store_true",
                   help="write the MBCCC series and cumulated IRFs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drvar", description="Dimension-reducible VAR toolkit")
    parser.add_argument("--version", action="version", version=f"drvar {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform", help="apply tcodes, clean outliers, standardize")
    p.add_argument("input")
    _transform_opts(p)
    _common(p)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("select", help="eigenvalue scree, LY rank and information criteria")
    p.add_argument("input")
    _select_opts(p)
    _common(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("fit", help="estimate a DRVAR and save it as JSON")
    p.add_argument("input")
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--p0", type=int, default=DEFAULT_P0)
    p.add_argument("--method", choices=("ols", "fgls"), default="ols")
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("forecast", help="iterate a saved model forward")
    p.add_argument("model")
    p.add_argument("input", help="panel whose last p rows start the forecast")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--original-units", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("structural", help="band covolatility, shocks, IRFs and contributions")
    p.add_argument("model")
    p.add_argument("input", help="the panel the model was fitted on")
    _structural_opts(p)
    _common(p)
    p.set_defaults(func=cmd_structural)

    p = sub.add_parser("pipeline", help="transform, select, fit and structural in one run")
    p.add_argument("input", nargs="?", help="raw panel CSV (default: bundled synthetic panel)")
    _transform_opts(p)
    _select_opts(p)
    p.add_argument("--criterion", choices=PENALTIES, default="HQIC")
    p.add_argument("--r", type=int, help="override the selected rank")
    p.add_argument("--p-fixed", action="store_true", help="keep --p even when --pmax is given")
    _structural_opts(p)
    _common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("mc", help="Monte Carlo replication of rank selection")
    p.add_argument("--grid", help='JSON: {"cells": [{"n", "r", "T_ratio", "reps"}, ...]}')
    p.add_argument("--design", choices=("artificial", "calibrated"), default="artificial")
    p.add_argument("--reps", type=int, default=0, help="override per-cell replications (calibrated design default: 100)")
    p.add_argument("--T", type=int, default=484, help="sample size for the calibrated design")
    p.add_argument("--R", type=int, default=11)
    p.add_argument("--method", choices=("ols", "fgls"), default="ols")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    _common(p)
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("fixture", help="generate the synthetic raw macro panel")
    p.add_argument("--path", help="write here instead of the run directory")
    p.add_argument("--n", type=int, default=211)
    p.add_argument("--T", type=int, default=242)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--seed", type=int, default=7)
    _common(p)
    p.set_defaults(func=cmd_fixture)
    return parser


def _apply_config(parser, argv):
    """Parse with defaults taken from ``--config`` so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return parser.parse_args(argv)
    subs = parser._subparsers._group_actions[0].choices
    command = next((t for t in rest if t in subs), None)
    if command is None:
        return parser.parse_args(argv)
    try:
        doc = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    sub = subs[command]
    known_dests = {a.dest for a in sub._actions}
    unknown = sorted(set(doc) - known_dests)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    for action in sub._actions:
        if action.dest in doc:
            action.required = False
    sub.set_defaults(**doc)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        # argparse reports usage problems with status 2 already
        return int(exc.code or 0)
    except DRVARError as exc:
        print(f"drvar: error code={exc.code} exit={exc.exit_code}: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="drvar: %(levelname)s: %(message)s")
    try:
        run = Run(args.command, args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args, run)
        run.write_manifest()
    except DRVARError as exc:
        print(f"drvar: error code={exc.code} exit={exc.exit_code}: {' '.join(str(exc).split())}",
              file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"drvar: error code=data exit=3: {exc}", file=sys.stderr)
        return 3
    print(str(run.dir))
    return 0


if __name__ == "__main__":
    sys.exit(main())
