"""
Command-line interface.

    positivity-ctmle estimate --input data.csv --estimator tmle --selector ctmle
    positivity-ctmle simulate --C 2 --n 1000 --R 200 --seed 7 --out results/
    positivity-ctmle sweep --C 1 --n 200 --R 200 --out sweep.csv
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .datafile import DataFormatError, read_dataset, write_dataset
from .estimators import AteEstimate, Dataset, aipw_estimate, hajek_estimate, initial_outcome_fit, ipw_estimate
from .exceptions import EstimationError
from .selectors import (
    DEFAULT_K_REPEATS,
    DEFAULT_V,
    ctmle_select,
    cv_select_gamma,
    mv_select_gamma,
    tmle_over_grid,
)
from .simulation import (
    ADAPTIVE,
    ESTIMATORS,
    TABLE_METHODS,
    DgpConfig,
    SimulationError,
    SimulationSettings,
    coverage_table,
    fit_nuisances,
    monte_carlo_true_ses,
    parse_method,
    rows_to_csv,
    run_replications,
    run_sweep,
    sample_dataset,
)
from .truncation import TruncationGrid, make_grid, truncate_upper

SCHEMA_VERSION = 1


class UsageError(ValueError):
    pass


def build_grid(gamma_min: float, gamma_max: float, step: float) -> TruncationGrid:
    if gamma_min == gamma_max:
        return TruncationGrid.from_values([gamma_max])
    return make_grid(gamma_min, gamma_max, step)


def parse_selector(text: str) -> tuple[str, float | None]:
    if text in ("cv", "mv", "ctmle"):
        return text, None
    if text.startswith("fixed:"):
        try:
            gamma = float(text.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad selector {text!r}") from None
        if not 0 < gamma <= 1:
            raise UsageError("fixed truncation level must lie in (0, 1]")
        return "fixed", gamma
    raise UsageError(f"selector must be fixed:<gamma>, cv, mv or ctmle, got {text!r}")


def estimate(
    data: Dataset,
    estimator: str = "tmle",
    selector: str = "ctmle",
    grid: TruncationGrid | None = None,
    V: int = DEFAULT_V,
    k_repeats: int = DEFAULT_K_REPEATS,
    seed: int = 0,
    known_ps: float | None = None,
    outcome_columns=None,
    level: float = 0.95,
) -> AteEstimate:
    """Fit nuisances, choose the truncation level and compute one ATE estimate."""
    grid = grid or make_grid()
    kind, gamma = parse_selector(selector)
    if estimator not in ESTIMATORS:
        raise UsageError(f"estimator must be one of {', '.join(ESTIMATORS)}")
    if kind in ("mv", "ctmle") and estimator != "tmle":
        raise UsageError(f"selector {kind} is defined for the tmle estimator only")
    if known_ps is not None and kind != "fixed":
        raise UsageError("--known-ps can only be combined with a fixed selector")

    if known_ps is not None:
        if not 0 < known_ps < 1:
            raise UsageError("--known-ps must lie strictly inside (0, 1)")
        ps = np.full(data.n, known_ps)
        q0 = initial_outcome_fit(data, outcome_columns) if estimator in ("aipw", "tmle") else None
    else:
        ps, q0 = fit_nuisances(data, outcome_columns)

    if kind == "ctmle":
        est, _, _ = ctmle_select(q0, data, grid, V, seed, ps=ps, level=level)
        return est
    if kind == "cv":
        gamma = cv_select_gamma(data, grid, V, seed)
    elif kind == "mv":
        gamma = mv_select_gamma(data, grid, k_repeats, seed, q0=q0, ps=ps)

    if estimator == "tmle":
        est = tmle_over_grid(data, ps, q0, [gamma], level)[0]
    else:
        ps_g = truncate_upper(ps, gamma)
        if estimator == "ipw":
            est = ipw_estimate(data, ps_g, gamma, level)
        elif estimator == "hajek":
            est = hajek_estimate(data, ps_g, gamma, level)
        else:
            est = aipw_estimate(data, ps_g, q0, gamma, level)
    est.method = estimator if kind == "fixed" else f"{kind}-{estimator}"
    return est


def estimate_report(est: AteEstimate) -> dict:
    doc = est.to_dict()
    doc["schema_version"] = SCHEMA_VERSION
    return doc


def _write(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    if not os.path.exists(args.input):
        raise FileNotFoundError(f"input file not found: {args.input}")
    data, names = read_dataset(args.input)
    columns = None
    if args.outcome_covariates:
        wanted = [c.strip().lower() for c in args.outcome_covariates.split(",") if c.strip()]
        missing = [c for c in wanted if c not in names]
        if missing:
            raise UsageError(f"unknown covariate column(s): {', '.join(missing)}")
        columns = [names.index(c) for c in wanted]
    est = estimate(
        data,
        args.estimator,
        args.selector,
        build_grid(args.gamma_min, args.gamma_max, args.gamma_step),
        args.V,
        args.k_repeats,
        args.seed,
        args.known_ps,
        columns,
        args.level,
    )
    doc = estimate_report(est)
    if args.format == "csv":
        row = {k: v for k, v in doc.items() if k != "diagnostics"}
        _write(rows_to_csv([row]), args.out)
    else:
        _write(json.dumps(doc, indent=2) + "\n", args.out)
    return 0


def _config(args) -> DgpConfig:
    return DgpConfig(C=args.C, n=args.n, rho=args.rho, seed=args.seed, sum_from=args.sum_from, effect=args.effect)


def _settings(args) -> SimulationSettings:
    build_grid(args.gamma_min, args.gamma_max, args.gamma_step)  # validates
    return SimulationSettings(args.gamma_min, args.gamma_max, args.gamma_step, args.V, args.k_repeats)


def cmd_simulate(args) -> int:
    config = _config(args)
    settings = _settings(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        parse_method(m)
    if args.true_se:
        methods += [m for m in TABLE_METHODS if m not in methods]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.dump_data:
        data_dir = out / "data"
        data_dir.mkdir(exist_ok=True)
        for r in range(args.R):
            write_dataset(sample_dataset(config, r), data_dir / f"rep_{r:04d}.csv")

    status = 0
    try:
        report = run_replications(config, methods, args.R, settings, args.jobs)
    except SimulationError as exc:
        if exc.report is None:
            raise
        report, status = exc.report, 1
        print(f"error: {exc}", file=sys.stderr)

    fmt = args.format
    if fmt in (None, "csv"):
        (out / "simulation.csv").write_text(report.to_csv())
    if fmt in (None, "json"):
        (out / "simulation.json").write_text(report.to_json(args.keep_replicates))
    if args.true_se:
        true_ses = monte_carlo_true_ses(config, list(TABLE_METHODS), args.true_se, settings, args.jobs)
        rows = coverage_table(report, true_ses)
        if fmt in (None, "csv"):
            (out / "coverage.csv").write_text(rows_to_csv(rows))
        if fmt in (None, "json"):
            doc = {"schema_version": SCHEMA_VERSION, "R": args.R, "R_true_se": args.true_se,
                   "true_se": true_ses, "rows": rows}
            (out / "coverage.json").write_text(json.dumps(doc, indent=2) + "\n")
    return status


def cmd_sweep(args) -> int:
    config = _config(args)
    settings = _settings(args)
    estimators = [e.strip() for e in args.estimators.split(",") if e.strip()]
    bad = [e for e in estimators if e not in ESTIMATORS]
    if bad:
        raise UsageError(f"unknown estimator(s): {', '.join(bad)}")
    try:
        rows = run_sweep(config, estimators, args.R, settings, args.jobs)
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.format == "json":
        _write(json.dumps({"schema_version": SCHEMA_VERSION, "rows": rows}, indent=2) + "\n", args.out)
    else:
        _write(rows_to_csv(rows), args.out)
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--gamma-min", type=float, default=0.60)
    p.add_argument("--gamma-max", type=float, default=1.00)
    p.add_argument("--gamma-step", type=float, default=0.01)
    p.add_argument("--V", type=int, default=DEFAULT_V, help="cross-validation folds")
    p.add_argument("--k-repeats", type=int, default=DEFAULT_K_REPEATS, help="MV half-sample splits")


def _dgp(p: argparse.ArgumentParser) -> None:
    p.add_argument("--C", type=float, default=0.0, help="positivity parameter (treatment intercept)")
    p.add_argument("--n", type=int, default=1000, help="sample size")
    p.add_argument("--R", type=int, default=200, help="replications")
    p.add_argument("--rho", type=float, default=0.1, help="covariate correlation")
    p.add_argument("--sum-from", type=int, default=3, choices=(2, 3))
    p.add_argument("--effect", type=float, default=2.0, help="treatment coefficient in the outcome model")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="positivity-ctmle", description=__doc__.split("\n")[1].strip() or None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate the ATE on a CSV dataset")
    _common(p)
    p.add_argument("--input", required=True, help="CSV with header y,a,w1,...,wp")
    p.add_argument("--estimator", default="tmle", choices=ESTIMATORS)
    p.add_argument("--selector", default="ctmle", help="fixed:<gamma>, cv, mv or ctmle")
    p.add_argument("--known-ps", type=float, default=None, help="use this constant propensity score")
    p.add_argument("--outcome-covariates", default=None, help="comma list of w-columns for the outcome model")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", default=None, help="output file (default stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="Monte Carlo study of the adaptive estimators")
    _common(p)
    _dgp(p)
    p.add_argument("--methods", default="tmle,cv-tmle,mv-tmle,c-tmle",
                   help=f"comma list; estimators {ESTIMATORS}, est@gamma, or {ADAPTIVE}")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default=None, help="write only this format")
    p.add_argument("--keep-replicates", action="store_true", help="include per-replication arrays in JSON")
    p.add_argument("--true-se", type=int, default=None, metavar="R_LARGE",
                   help="also estimate true SEs from R_LARGE replications and write the coverage table")
    p.add_argument("--dump-data", action="store_true", help="write every simulated dataset under OUT/data")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="fixed-truncation bias/SE/MSE curves")
    _common(p)
    _dgp(p)
    p.add_argument("--estimators", default=",".join(ESTIMATORS))
    p.add_argument("--out", default=None, help="output CSV (default stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except (FileNotFoundError, DataFormatError, UsageError, EstimationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
