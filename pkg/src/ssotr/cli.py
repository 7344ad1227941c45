"""Command-line interface: ``ssotr fit | decide | simulate``.

Exit codes: 0 success, 2 invalid input or flags, 3 numerical failure
(rank deficiency, propensity separation, empty arm), 4 simulation aborted
because more than 5% of replications failed.

Reports are JSON objects carrying ``schema_version``.  A fit report looks
like::

    {
      "schema_version": 1,
      "method": "ss", "n": 500, "N": 5000, "p": 2,
      "columns": ["x1", "x2"],
      "beta": [...], "se": [...], "ci95": [[lo, hi], ...],   # raw covariate scale
      "standardized": {"beta": [...], "se": [...], "center": [...], "scale": [...]},
      "bandwidth": 0.35, "kfolds": 5,                         # np/ss only
      "theta1": [...], "theta0": [...],                       # ss only
      "propensity_gamma": [...],                               # standardized scale
      "diagnostics": {"bandwidth_rule_flags": {...}, "excluded_rows": 0, ...}
    }
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data_model import _atomic_write_rows, load_csv, read_covariates, standardize
from .errors import DataError, NumericalError
from .estimators import METHODS, DecisionRule, RegimeFit, estimate, normal_quantile
from .kernel_regression import validate_grid
from .simulation import BASELINES, MODELS, SimConfig, StudyAborted, run_study

SCHEMA_VERSION = 1
THREADS_ENV = "SSOTR_THREADS"

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_ABORTED = 4

log = logging.getLogger("ssotr")


class UsageError(Exception):
    pass


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _emit(text: str, output: Optional[str]) -> None:
    if output:
        atomic_write_text(output, text)
    else:
        sys.stdout.write(text)


def _positive_int(value: str) -> int:
    try:
        out = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
    if out < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return out


def _bandwidth(value: str):
    if value == "auto":
        return value
    try:
        h = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError("bandwidth must be 'auto' or a positive number") from None
    if not h > 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return h


def _clip(value: str) -> float:
    eps = float(value)
    if not 0 < eps < 0.5:
        raise argparse.ArgumentTypeError("clip-eps must lie in (0, 0.5)")
    return eps


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------


def fit_report(fit: RegimeFit, n: int, N: int, columns: Sequence[str]) -> dict:
    beta_raw, cov_raw = fit.raw_scale()
    se_raw = np.sqrt(np.clip(np.diag(cov_raw), 0.0, None))
    z = normal_quantile(0.975)
    report = {
        "schema_version": SCHEMA_VERSION,
        "method": fit.method,
        "n": n,
        "N": N,
        "p": len(columns),
        "columns": list(columns),
        "beta": beta_raw.tolist(),
        "se": se_raw.tolist(),
        "ci95": np.column_stack([beta_raw - z * se_raw, beta_raw + z * se_raw]).tolist(),
        "standardized": {
            "beta": fit.beta.tolist(),
            "se": fit.se.tolist(),
            "ci95": fit.ci95.tolist(),
            "center": fit.center.tolist(),
            "scale": fit.scale.tolist(),
        },
    }
    if fit.method != "tr":
        report["bandwidth"] = fit.bandwidth
        report["kfolds"] = fit.K
    if fit.theta1 is not None:
        report["theta1"] = fit.theta1.tolist()
        report["theta0"] = fit.theta0.tolist()
    diag = dict(fit.diagnostics)
    report["propensity_gamma"] = diag.pop("propensity_gamma", None)
    diag.setdefault("excluded_rows", 0)
    report["diagnostics"] = diag
    return report


def format_fit_table(report: dict) -> str:
    names = ["intercept", *report["columns"]]
    lines = [f"method={report['method']}  n={report['n']}  N={report['N']}"]
    if "bandwidth" in report:
        lines[0] += f"  h={report['bandwidth']:.4g}  K={report['kfolds']}"
    lines.append(f"{'':<12}{'beta':>10}{'SE':>10}{'95% CI':>24}")
    for name, b, se, (lo, hi) in zip(names, report["beta"], report["se"], report["ci95"]):
        lines.append(f"{name:<12}{b:>10.4f}{se:>10.4f}   [{lo:>8.4f}, {hi:>8.4f}]")
    return "\n".join(lines) + "\n"


def cmd_fit(args) -> int:
    if args.method in ("np", "ss") and not args.unlabeled:
        raise UsageError(f"{args.method} requires unlabeled data (--unlabeled)")
    ds_raw = load_csv(args.labeled, args.unlabeled)
    ds = standardize(ds_raw)
    cols = None
    if args.propensity_cols:
        try:
            cols = [ds.columns.index(c.strip()) for c in args.propensity_cols.split(",")]
        except ValueError:
            raise UsageError(f"--propensity-cols must name columns among {', '.join(ds.columns)}") from None
    grid = validate_grid([float(v) for v in args.grid.split(",")]) if args.grid else None
    fit = estimate(
        ds,
        method=args.method,
        K=args.kfolds,
        bandwidth=args.bandwidth,
        seed=args.seed,
        clip_eps=args.clip_eps,
        propensity_cols=cols,
        grid=grid,
    )
    report = fit_report(fit, ds.n, ds.N, ds.columns)
    text = json.dumps(report, indent=2) + "\n" if args.format == "json" else format_fit_table(report)
    _emit(text, args.output)
    return EXIT_OK


# --------------------------------------------------------------------------
# decide
# --------------------------------------------------------------------------


def load_rule(path) -> tuple[DecisionRule, dict]:
    try:
        report = json.loads(Path(path).read_text(encoding="utf-8"))
        std = report["standardized"]
        rule = DecisionRule(np.array(std["beta"]), np.array(std["center"]), np.array(std["scale"]))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a valid fit report ({exc})") from None
    return rule, report


def crosstab(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    table = np.zeros((2, 2), dtype=int)
    np.add.at(table, (d1.astype(int), d2.astype(int)), 1)
    return table


def format_crosstab(table: np.ndarray, labels: tuple[str, str]) -> str:
    a, b = labels
    total = table.sum()
    agree = (table[0, 0] + table[1, 1]) / total if total else float("nan")
    return (
        f"{'':<14}{b + '=0':>10}{b + '=1':>10}\n"
        f"{a + '=0':<14}{table[0, 0]:>10}{table[0, 1]:>10}\n"
        f"{a + '=1':<14}{table[1, 0]:>10}{table[1, 1]:>10}\n"
        f"agreement {agree:.4f}\n"
    )


def cmd_decide(args) -> int:
    rules = [load_rule(p) for p in args.fit]
    p = rules[0][0].beta.size - 1
    if any(r.beta.size - 1 != p for r, _ in rules):
        raise DataError("dimension mismatch between fit reports")
    x = read_covariates(args.input, p)
    decisions = [rule(x) for rule, _ in rules]
    header = [f"x{k + 1}" for k in range(p)] + ["decision"] + [f"decision_{i + 1}" for i in range(1, len(rules))]
    rows = (
        [*map(repr, map(float, xi)), *(str(int(d[i])) for d in decisions)]
        for i, xi in enumerate(x)
    )
    if args.output:
        _atomic_write_rows(args.output, header, rows)
    else:
        import csv

        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    if len(rules) == 2:
        labels = tuple(rep.get("method", f"fit{i + 1}").upper() for i, (_, rep) in enumerate(rules))
        if labels[0] == labels[1]:
            labels = (labels[0] + "#1", labels[1] + "#2")
        sys.stderr.write(format_crosstab(crosstab(decisions[0], decisions[1]), labels))
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.model not in MODELS:
        raise UsageError(f"unknown model {args.model!r}; valid models: {', '.join(MODELS)}")
    if args.baseline not in BASELINES:
        raise UsageError(f"unknown baseline {args.baseline!r}; valid baselines: {', '.join(BASELINES)}")
    grid = tuple(validate_grid([float(v) for v in args.grid.split(",")])) if args.grid else None
    try:
        cfg = SimConfig(
            model=args.model,
            baseline=args.baseline,
            n=args.n,
            N=args.N,
            replications=args.reps,
            mc_truth_size=args.mc_size,
            seed=args.seed,
            K=args.kfolds,
            grid=grid,
            clip_eps=args.clip_eps,
            include_np=args.include_np,
            threads=args.threads,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = run_study(cfg)
    table = report.format_table() + "\n"
    if args.format == "json":
        _emit(json.dumps(report.to_dict(), indent=2) + "\n", args.output)
        sys.stderr.write(table)
    else:
        _emit(table, args.output)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssotr", description="Semi-supervised optimal linear treatment regimes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--kfolds", type=_positive_int, default=5, help="cross-fitting folds (default 5)")
    common.add_argument("--clip-eps", type=_clip, default=0.01, help="propensity clip bound (default 0.01)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--grid", help="comma-separated bandwidth grid for --bandwidth auto")
    common.add_argument("--output", "-o", help="output path (default: stdout)")
    common.add_argument("--format", choices=("json", "table"), default="json")
    common.add_argument("--threads", type=_positive_int, default=_default_threads(),
                        help=f"worker processes (default ${THREADS_ENV} or 1)")

    p_fit = sub.add_parser("fit", parents=[common], help="estimate a linear treatment regime from CSV data")
    p_fit.add_argument("--method", choices=METHODS, default="ss")
    p_fit.add_argument("--labeled", required=True, help="CSV with columns x1..xp,a,y")
    p_fit.add_argument("--unlabeled", help="CSV with columns x1..xp")
    p_fit.add_argument("--bandwidth", type=_bandwidth, default="auto")
    p_fit.add_argument("--propensity-cols", help="comma-separated covariate names for the propensity model")
    p_fit.set_defaults(func=cmd_fit)

    p_dec = sub.add_parser("decide", help="apply fitted rules to covariates")
    p_dec.add_argument("--fit", action="append", required=True,
                       help="fit report (JSON); give twice for a cross-tabulation")
    p_dec.add_argument("--input", required=True, help="CSV with columns x1..xp")
    p_dec.add_argument("--output", "-o")
    p_dec.set_defaults(func=cmd_decide)

    p_sim = sub.add_parser("simulate", parents=[common], help="run the Monte Carlo study for one cell")
    p_sim.add_argument("--model", required=True, help=f"one of {', '.join(MODELS)}")
    p_sim.add_argument("--baseline", required=True, help=f"one of {', '.join(BASELINES)}")
    p_sim.add_argument("--reps", type=_positive_int, default=100)
    p_sim.add_argument("--n", type=_positive_int, default=500)
    p_sim.add_argument("--N", type=_positive_int, default=5000)
    p_sim.add_argument("--mc-size", type=_positive_int, default=500_000)
    p_sim.add_argument("--include-np", action="store_true")
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "command", None) == "decide" and len(args.fit) > 2:
        parser.error("at most two --fit reports")
    try:
        return args.func(args)
    except (UsageError, DataError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except StudyAborted as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ABORTED
    except NumericalError as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
