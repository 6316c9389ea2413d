"""Command-line entry point: ``tffa <command> [options]``.

Exit status is 0 on success, 2 when inputs or configuration are rejected
and 1 on any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, pipeline as pl
from ._parallel import set_default_threads
from .tensorio import TensorFormatError

log = logging.getLogger("tffa")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _floats(text):
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a list of numbers, got {text!r}") from exc


def _config(args, check_grid=False, **overrides) -> pl.PipelineConfig:
    """Config from ``--config`` (if any) with command-line values layered on top."""
    obj = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise pl.ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
    if args.seed is not None:
        obj["seed"] = args.seed
    for section, values in overrides.items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            obj.setdefault(section, {}).update(values)
    return pl.validate_config(obj, check_grid=check_grid)


def cmd_simulate(args):
    cfg = _config(args, True, simulation={"M": args.M, "J": args.J, "K": args.K, "n": args.n,
                                    "scheme": args.scheme, "delta": args.delta})
    manifest = pl.stage_simulate(cfg.sim_config(), args.out, args.threads)
    print(manifest)


def cmd_cov(args):
    rule = {"fixed": "fixed_fraction"}.get(args.mask_rule, args.mask_rule)
    cfg = _config(args, covariance={"mask_rule": rule, "delta": args.delta,
                                    "radius": args.radius, "center": args.center})
    out = Path(args.out)
    if out.suffix == ".tft":
        tmp = pl.stage_cov(args.manifest, cfg, out.parent, args.threads)
        if tmp != out:
            tmp.replace(out)
            tmp.with_suffix(".json").replace(out.with_suffix(".json"))
    else:
        out = pl.stage_cov(args.manifest, cfg, out, args.threads)
    print(out)


def cmd_fit(args):
    cfg = _config(args, fit={"max_rank": args.max_rank, "select": args.select, "k": args.k,
                             "threshold": args.threshold, "optimizer": args.optimizer})
    print(pl.stage_fit(args.cov, cfg, args.out, args.threads))


def cmd_rotate(args):
    cfg = _config(args, rotation={"method": args.method, "alpha": args.alpha})
    print(pl.stage_rotate(args.loadings, cfg, args.out, args.threads))


def cmd_postprocess(args):
    cfg = _config(args, postprocess={"folds": args.folds, "sigma_grid": args.sigma_grid,
                                     "kappa_grid": args.kappa_grid})
    print(pl.stage_postprocess(args.fit, args.rot, cfg, args.out, args.threads))


def cmd_scores(args):
    cfg = _config(args, scores={"P": args.P, "gamma_grid": args.gamma_grid, "V": args.folds,
                                "emit_fold_fits": True if args.emit_fold_fits else None})
    print(pl.stage_scores(args.scans, args.loadings, cfg, args.out, args.threads))


def cmd_diagnose(args):
    print(pl.stage_diagnose(args.scores, args.out))


def cmd_pipeline(args):
    cfg = _config(args, True)
    res = pl.run_pipeline(cfg, args.out, args.threads, resume=not args.no_resume)
    print(json.dumps({"run": str(res.path), "executed": res.executed, "skipped": res.skipped}))


def cmd_study(args):
    cfg = _config(args, True)
    if args.mode is not None or args.replications is not None:
        raw = cfg.to_json()
        if args.mode is not None:
            raw["mode"] = args.mode
        if args.replications is not None:
            raw["replications"] = args.replications
        cfg = pl.validate_config(raw)
    report = pl.run_study(cfg, threads=args.threads)
    for f in pl.emit_report(report, args.out):
        print(f)


def cmd_report(args):
    report = pl.load_report(args.input)
    for f in pl.emit_report(report, args.out):
        print(f)


def cmd_schema(args):
    text = json.dumps(pl.CONFIG_SCHEMA, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="global seed (u64)")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tffa", description="Temporal functional factor analysis")
    p.add_argument("--version", action="version", version=f"tffa {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a dataset")
    s.add_argument("--out", required=True)
    for name, typ in (("M", int), ("J", int), ("K", int), ("n", int), ("delta", float)):
        s.add_argument(f"--{name}", type=typ)
    s.add_argument("--scheme", choices=["BI", "NET", "TRI"])
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("cov", parents=[common], help="empirical spatial covariance")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mask-rule", choices=["fixed", "fixed_fraction", "distance"])
    s.add_argument("--delta", type=float)
    s.add_argument("--radius", type=int)
    s.add_argument("--center", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--out", required=True, help="output .tft file or directory")
    s.set_defaults(func=cmd_cov)

    s = sub.add_parser("fit", parents=[common], help="masked low-rank completion")
    s.add_argument("--cov", required=True)
    s.add_argument("--max-rank", type=int)
    s.add_argument("--select", choices=["elbow", "threshold", "fixed"])
    s.add_argument("--k", type=int)
    s.add_argument("--threshold", type=float)
    s.add_argument("--optimizer", choices=["quasi_newton", "block_sgd", "hybrid"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("rotate", parents=[common], help="rotate loadings")
    s.add_argument("--loadings", required=True)
    s.add_argument("--method", choices=["varimax", "quartimax", "oblimin", "quartimin"])
    s.add_argument("--alpha", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rotate)

    s = sub.add_parser("postprocess", parents=[common], help="smooth and shrink rotated loadings")
    s.add_argument("--fit", required=True)
    s.add_argument("--rot", required=True)
    s.add_argument("--folds", type=int)
    s.add_argument("--sigma-grid", type=_floats)
    s.add_argument("--kappa-grid", type=_floats)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("scores", parents=[common], help="factor scores by penalised regression")
    s.add_argument("--scans", required=True, help="dataset manifest")
    s.add_argument("--loadings", required=True)
    s.add_argument("--P", type=int)
    s.add_argument("--gamma-grid", type=_floats)
    s.add_argument("--folds", type=int)
    s.add_argument("--emit-fold-fits", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scores)

    s = sub.add_parser("diagnose", parents=[common], help="factor covariance diagnostic")
    s.add_argument("--scores", required=True)
    s.add_argument("--out", required=True, help="output JSON path")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("pipeline", parents=[common], help="run all stages")
    s.add_argument("--out", required=True)
    s.add_argument("--no-resume", action="store_true")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("study", parents=[common], help="replicated simulation study")
    s.add_argument("--mode", choices=["study1", "study2", "study3"])
    s.add_argument("--replications", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("report", parents=[common], help="re-emit a saved study report")
    s.add_argument("--input", required=True, help="report.json written by 'study'")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("schema", help="print the configuration JSON schema")
    s.add_argument("--out")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_VALIDATION
        set_default_threads(args.threads)
    try:
        args.func(args)
    except (ValueError, TensorFormatError, FileNotFoundError) as exc:
        # ValueError covers ConfigError, IdentifiabilityError and dataset checks
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
