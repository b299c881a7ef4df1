"""Command-line entry point: ``crt-ancova {simulate,compare-reml,analyze,icc}``.

Exit codes: 0 success, 2 invalid usage, 3 runtime failure.
"""

import argparse
import math
import os
import sys

from . import dataio
from .clanova import fit_cluster_ancova
from .dgp import ScenarioConfig, icc_estimate
from .errors import CrtAncovaError
from .mmfit import fit
from .simkit import DEFAULT_ROSTER, compare_ml_reml, parse_estimator, run_study
from .variance import estimate

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _probability(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {value}")
    return value


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("CRT_ANCOVA_THREADS")
    if env:
        try:
            return _positive_int(env)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"CRT_ANCOVA_THREADS: {exc}") from None
    return os.cpu_count() or 1


def _add_scenario_flags(p, mc=False):
    p.add_argument("--scenario", type=int, choices=(1, 2, 3), required=True,
                   help="data-generating scenario")
    p.add_argument("--gamma", action="store_true",
                   help="add a Gamma(25, 1) cluster effect to both potential outcomes")
    p.add_argument("--superpop-n", type=_positive_int, default=None,
                   help="source-population size per cluster (default: 12 for scenarios 1 and 3, 8 for 2)")
    p.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    if mc:
        return
    p.add_argument("--clusters", type=_positive_int, required=True, help="number of clusters m")
    p.add_argument("--reps", type=_positive_int, required=True, help="number of replications")
    p.add_argument("--pi", type=_probability, default=0.5, help="randomization probability")
    p.add_argument("--level", type=_probability, default=0.95, help="confidence level")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker processes (default: $CRT_ANCOVA_THREADS or the core count)")
    _add_output_flags(p)


def _add_output_flags(p):
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown",
                   help="output format (default markdown)")
    p.add_argument("--out", default=None, help="output file (default standard output)")


def build_parser():
    parser = _Parser(prog="crt-ancova",
                     description="Covariate adjustment for cluster-randomized trials.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    _add_scenario_flags(p)
    p.add_argument("--estimators", default=None,
                   help="comma list of Method[:ML|REML][:Variance]; methods MixedUnadjusted, "
                        "MixedAncova, ClusterAncova; variances ModelBased, Sandwich, "
                        "ClusterClassical, ClusterRobust (default: the three methods with ML "
                        "and model-based / classical variance)")

    p = sub.add_parser("compare-reml", help="paired ML and REML mixed-model study")
    _add_scenario_flags(p)

    p = sub.add_parser("analyze", help="estimate the treatment effect from a data file")
    p.add_argument("--data", required=True, help="long-format delimited file")
    p.add_argument("--cluster", required=True, help="cluster identifier column")
    p.add_argument("--treatment", required=True, help="0/1 treatment column")
    p.add_argument("--outcome", required=True, help="outcome column")
    p.add_argument("--covariates", default="", help="comma-separated covariate columns")
    p.add_argument("--method", default="all",
                   choices=("mixed-unadj", "mixed-ancova", "cluster-ancova", "all"))
    p.add_argument("--estimation", choices=("ml", "reml"), default="ml")
    p.add_argument("--variance", choices=("model", "sandwich"), default="model",
                   help="model-based or robust variance (cluster-level uses classical / HC0)")
    p.add_argument("--pi", type=_probability, default=0.5,
                   help="randomization probability (recorded with the report)")
    p.add_argument("--level", type=_probability, default=0.95, help="confidence level")
    p.add_argument("--delimiter", default=",", help="field delimiter (default comma)")
    _add_output_flags(p)

    p = sub.add_parser("icc", help="Monte Carlo intracluster correlation of a scenario")
    _add_scenario_flags(p, mc=True)
    p.add_argument("--mc-clusters", type=_positive_int, default=100_000,
                   help="number of simulated clusters (default 100000)")
    p.add_argument("--arm", choices=("0", "1", "marginal"), default="0",
                   help="potential outcome used (default 0, the control arm)")
    return parser


def _config(args):
    try:
        return ScenarioConfig(args.scenario, getattr(args, "clusters", 1), args.superpop_n,
                              getattr(args, "pi", 0.5), args.gamma, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _emit(text, args):
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_simulate(args):
    config = _config(args)
    if args.estimators:
        try:
            roster = tuple(parse_estimator(t) for t in args.estimators.split(","))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if len({s.label for s in roster}) != len(roster):
            raise UsageError("duplicate estimator in --estimators")
    else:
        roster = DEFAULT_ROSTER
    if args.reps < 2:
        raise UsageError("--reps must be at least 2")
    table = run_study(config, roster, args.reps, args.level, _threads(args))
    _emit(dataio.format_report(table, args.format), args)


def cmd_compare_reml(args):
    config = _config(args)
    if args.reps < 2:
        raise UsageError("--reps must be at least 2")
    table = compare_ml_reml(config, args.reps, args.level, _threads(args))
    _emit(dataio.format_report(table, args.format), args)


def _analyze_rows(data, args):
    mode = args.estimation.upper()
    variance = "Sandwich" if args.variance == "sandwich" else "ModelBased"
    methods = ("mixed-unadj", "mixed-ancova", "cluster-ancova") if args.method == "all" else (args.method,)
    reports = []
    for method in methods:
        if method == "mixed-unadj":
            sub = data.drop_covariates()
            f = fit(sub, mode)
            reports.append(estimate(f, sub, variance, args.level, f"mixed-unadjusted ({mode})"))
        elif method == "mixed-ancova":
            f = fit(data, mode)
            reports.append(estimate(f, data, variance, args.level, f"mixed-ANCOVA ({mode})"))
        else:
            vmode = "robust" if args.variance == "sandwich" else "classical"
            reports.append(fit_cluster_ancova(data, vmode, args.level).report)
    rows = []
    base = reports[0].se ** 2 if methods[0] == "mixed-unadj" and len(reports) > 1 else None
    for r in reports:
        d = {f: getattr(r, f) for f in dataio.ESTIMATE_FIELDS}
        if base is not None:
            d["pvr"] = 1.0 - r.se ** 2 / base if base > 0 else math.nan
        rows.append(d)
    return rows


def cmd_analyze(args):
    covs = tuple(c.strip() for c in args.covariates.split(",") if c.strip())
    if args.method != "mixed-unadj" and not covs:
        raise UsageError(f"--method {args.method} needs --covariates")
    if len(args.delimiter) != 1:
        raise UsageError("--delimiter must be a single character")
    schema = dataio.SchemaMap(args.cluster, args.treatment, args.outcome, covs,
                              delimiter=args.delimiter)
    try:
        data, report = dataio.read_trial(args.data, schema)
    except OSError as exc:
        raise CrtAncovaError(f"cannot read {args.data}: {exc}") from exc
    if report.dropped_rows or report.imputed_cells or report.removed_clusters:
        print(f"dropped {report.dropped_rows} rows with missing outcome, imputed "
              f"{report.imputed_cells} covariate cells, removed {report.removed_clusters} "
              "clusters", file=sys.stderr)
    _emit(dataio.format_report(_analyze_rows(data, args), args.format), args)


def cmd_icc(args):
    config = _config(args)
    arm = "marginal" if args.arm == "marginal" else int(args.arm)
    icc, se = icc_estimate(config, args.mc_clusters, arm=arm)
    sys.stdout.write(f"scenario {args.scenario}{' (gamma)' if args.gamma else ''}: "
                     f"icc = {icc:.4f} (se {se:.4f}, {args.mc_clusters} clusters)\n")


COMMANDS = {
    "simulate": cmd_simulate,
    "compare-reml": cmd_compare_reml,
    "analyze": cmd_analyze,
    "icc": cmd_icc,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except (CrtAncovaError, OSError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
