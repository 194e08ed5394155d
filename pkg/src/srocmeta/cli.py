"""Command-line front end: ``srocmeta {fit,sroc,simulate,validate}``.

Exit codes: 0 success, 1 operational or input error, 2 statistical failure
(non-convergence, boundary estimate or singular information matrix).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .data import CorrectionPolicy, DataError, NO_CORRECTION, ingest_csv, read_records_csv, validate
from .inference import FitConfig, FitError, FitResult, classify_failure, fit, wald_ci, z_pvalue
from .io import atomic_write_text
from .likelihood import PARAM_NAMES

EXIT_OK, EXIT_ERROR, EXIT_FAILURE = 0, 1, 2
SEED_ENV = "SROCMETA_SEED"

log = logging.getLogger("srocmeta")

_LABELS = {
    "alpha1": "alpha1", "alpha0": "alpha0", "gamma1": "gamma1", "gamma0": "gamma0",
    "tau1_sq": "tau1^2", "tau0_sq": "tau0^2", "rho": "rho",
}


_TESTED = ("alpha1", "alpha0", "gamma1", "gamma0")


class CliError(Exception):
    pass


def format_pvalue(p: float) -> str:
    if p != p:
        return "-"
    return "< 0.001" if p < 1e-3 else f"{p:.3f}"


def ausc_summary(res: FitResult, level: float | None = None):
    """AUSC, its delta-method SE and the logit-scale Wald interval."""
    from . import sroc

    level = res.level if level is None else level
    a = sroc.ausc(res.beta)
    se = sroc.ausc_variance(res.beta, res.cov_beta) ** 0.5
    return a, se, wald_ci(a, se, level, transform="logit")


def estimates_table(res: FitResult) -> str:
    crit = res.criterion.upper()
    head = f"{res.method.capitalize()}-{crit}  K = {res.n_studies}, thresholds = {len(res.thresholds)}"
    lines = [head, f"{'parameter':<10} {'estimate':>10} {'SE':>10} {'p-value':>9}"]
    for name, est, se in zip(PARAM_NAMES, res.theta.as_array(), res.se):
        p = z_pvalue(est, se) if name in _TESTED else float("nan")
        lines.append(f"{_LABELS[name]:<10} {est:>10.3f} {se:>10.3f} {format_pvalue(p):>9}")
    try:
        a, a_se, (lo, hi) = ausc_summary(res)
        pct = round(100 * res.level)
        lines.append(f"{'AUSC':<10} {a:>10.3f} {a_se:>10.3f}   {pct}% CI ({lo:.3f}, {hi:.3f})")
    except (ArithmeticError, ValueError):
        lines.append("AUSC       undefined")
    status = "converged" if res.converged else res.status
    flags = [k for k, v in res.boundary_flags.items() if v]
    if flags:
        status += f"; boundary: {', '.join(flags)}"
    if res.j_singular:
        status += "; singular information matrix"
    lines.append(f"status: {status}")
    return "\n".join(lines)


def _policy(args) -> CorrectionPolicy:
    if args.correction <= 0:
        return NO_CORRECTION
    return CorrectionPolicy(constant=args.correction)


def _fit_config(args) -> FitConfig:
    return FitConfig(method=args.method, criterion=args.criterion, level=args.level,
                     multistart=args.multistart)


def _fit_from_csv(args) -> tuple[FitResult, FitConfig, object]:
    ds = ingest_csv(args.input, _policy(args))
    cfg = _fit_config(args)
    return fit(ds, cfg), cfg, ds


def cmd_fit(args) -> int:
    res, cfg, _ = _fit_from_csv(args)
    text = res.to_json() + "\n"
    if args.output:
        atomic_write_text(args.output, text)
    if args.format == "json":
        sys.stdout.write(text)
    else:
        print(estimates_table(res))
    return EXIT_FAILURE if classify_failure(res, cfg) else EXIT_OK


def _load_fit(args) -> tuple[FitResult, FitConfig, object]:
    path = Path(args.input)
    if path.suffix.lower() == ".json":
        try:
            res = FitResult.from_json(path.read_text())
        except (KeyError, ValueError, TypeError) as exc:
            raise CliError(f"{path}: not a fit result ({exc})") from exc
        cfg = FitConfig(method=res.method, criterion=res.criterion, level=res.level)
        ds = ingest_csv(args.data, _policy(args)) if args.data else None
        return res, cfg, ds
    return _fit_from_csv(args)


def cmd_sroc(args) -> int:
    from . import sroc

    res, cfg, ds = _load_fit(args)
    level = args.level
    a, se, (lo, hi) = ausc_summary(res, level)
    pct = round(100 * level)
    print(f"AUSC {a:.3f}  SE {se:.3f}  {pct}% CI ({lo:.3f}, {hi:.3f})")
    if args.youden:
        cands = res.thresholds or None
        x, sse, ssp = sroc.youden_optimal(res, cands, refine=args.refine)
        print(f"Youden-optimal threshold {x:g}: SSe {100 * sse:.1f}%  SSp {100 * ssp:.1f}%")
    points = ()
    if ds is not None:
        points = [(1 - p, s) for st in ds.studies for s, p in zip(st.se, st.sp)]
    if args.output:
        sroc.emit_curve(res, args.output, args.grid, level, fmt=args.format, study_points=points)
    if args.svg:
        sroc.emit_curve(res, args.svg, args.grid, level, fmt="svg", study_points=points)
    return EXIT_FAILURE if classify_failure(res, cfg) else EXIT_OK


def resolve_seed(flag: int | None, config_seed: int) -> int:
    """Seed precedence: command-line flag, then the environment, then the config."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return config_seed


def cmd_simulate(args) -> int:
    from .simulation import ConfigError, SimConfig, run_mc, summary_csv, write_outputs

    try:
        cfg = SimConfig.from_json(args.config) if args.config else SimConfig()
        changes = {"seed": resolve_seed(args.seed, cfg.seed)}
        if args.replicates is not None:
            changes["replicates"] = args.replicates
        cfg = cfg.replace(**changes)
    except ConfigError as exc:
        raise CliError(f"invalid simulation config: {exc}") from exc
    result = run_mc(cfg, jobs=args.jobs, log_path=args.log)
    write_outputs(result, args.output, args.json)
    if not args.output:
        sys.stdout.write(summary_csv(result.summaries))
    for est, s in result.summaries.items():
        print(f"{est}: {s.used}/{s.attempted} replicates used, failure rate {s.failure_rate:.3f}",
              file=sys.stderr)
    return EXIT_OK


def cmd_validate(args) -> int:
    records = read_records_csv(args.input)
    bad = 0
    for rec in records:
        problems = validate(rec)
        for v in problems:
            print(f"study {rec.study_id}: {v}")
        bad += bool(problems)
    if bad:
        print(f"{bad} of {len(records)} studies invalid")
        return EXIT_ERROR
    thresholds = sorted({x for r in records for x in r.thresholds})
    print(f"{len(records)} studies valid; {len(thresholds)} distinct thresholds")
    return EXIT_OK


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=("pseudo", "riley"), default="pseudo",
                   help="within-study covariance: diagonal working independence (pseudo) "
                        "or the full multinomial matrix (riley); default pseudo")
    p.add_argument("--criterion", choices=("ml", "reml"), default="reml",
                   help="maximum likelihood or restricted maximum likelihood; default reml")
    p.add_argument("--level", type=float, default=0.95,
                   help="confidence level for intervals and regions; default 0.95")
    p.add_argument("--multistart", type=int, default=5,
                   help="number of optimiser starting points; default 5")
    p.add_argument("--correction", type=float, default=0.5,
                   help="continuity correction added when a count is 0 or n "
                        "(0 disables it); default 0.5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srocmeta",
        description="Meta-analysis of diagnostic accuracy reported at multiple thresholds.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fit", help="fit the model to a study CSV",
                       description="Fit the random-intercept model and print estimates, "
                                   "sandwich SEs and Wald p-values.")
    p.add_argument("input", help="CSV with columns study_id,threshold,tp,tn,n_diseased,n_nondiseased")
    p.add_argument("-o", "--output", help="write the fit result as JSON to this path")
    p.add_argument("--format", choices=("text", "json"), default="text",
                   help="what to print on stdout: estimates table (text) or the JSON result")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sroc", help="SROC curve, AUSC and Youden-optimal threshold",
                       description="Report AUSC with a logit-scale Wald interval and write the "
                                   "SROC curve. INPUT is a fit JSON or a study CSV to fit first.")
    p.add_argument("input", help="fit result JSON (*.json) or study CSV")
    p.add_argument("-o", "--output", help="write the curve to this path in --format")
    p.add_argument("--format", choices=("csv", "svg"), default="csv",
                   help="format of --output; default csv")
    p.add_argument("--grid", type=int, default=101,
                   help="number of interior false-positive-rate grid points; default 101")
    p.add_argument("--youden", action="store_true",
                   help="report the threshold maximising the Youden index")
    p.add_argument("--refine", action="store_true",
                   help="with --youden, search continuously between the extreme thresholds")
    p.add_argument("--svg", help="also write an SVG plot to this path")
    p.add_argument("--data", help="study CSV whose observed points are drawn when INPUT is a fit JSON")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_sroc)

    p = sub.add_parser("simulate", help="run a Monte Carlo experiment",
                       description="Simulate datasets, fit the requested estimators and summarise "
                                   f"them. The seed is taken from --seed, else ${SEED_ENV}, "
                                   "else the config.")
    p.add_argument("--config", help="simulation config JSON; defaults are used when omitted")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--replicates", type=int, help="override the number of replicates")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker processes; results do not depend on it; default 1")
    p.add_argument("-o", "--output", help="summary CSV path; printed to stdout when omitted")
    p.add_argument("--json", help="summary JSON path")
    p.add_argument("--log", help="per-replicate CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="check a study CSV against the data invariants",
                       description="Report every invariant violation in a study CSV.")
    p.add_argument("input", help="study CSV")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, DataError, FitError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
