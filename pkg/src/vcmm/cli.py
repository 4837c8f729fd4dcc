"""Command line entry point.

Every subcommand writes its files into ``--out``. On failure nothing is
printed to stdout; a JSON object ``{"error", "message", "stage"?, ...}`` goes
to stderr and the exit status is 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import PipelineError, VCMMError
from .pipeline import SUBCOMMANDS, RunSpec, run_pipeline, write_results

_HELP = {
    "fit": "fit the coefficient curves on the evaluation grid",
    "varcomp": "fit curves and estimate sigma^2 and Sigma",
    "bands": "simultaneous confidence bands for every coefficient",
    "test": "constancy test for every coefficient",
    "report": "full analysis: screen, refit constants, bands, composed effects",
    "simulate": "Monte Carlo study from the [simulate] config table",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vcmm", description="Varying-coefficient models for clustered data.")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        sp.add_argument("--input", help="CSV with columns cluster_id,y,u,x1..xp,z1..zq",
                        required=name != "simulate")
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--out", default="results", help="output directory (default: results)")
        sp.add_argument("--h", type=float, help="bandwidth override")
        sp.add_argument("--level", type=float,
                        help="test significance level; bands use 1 - level (default 0.05)")
        sp.add_argument("--grid", type=int, help="number of evaluation grid points")
        sp.add_argument("--seed", type=int, help="base random seed (simulate)")
    return parser


def _error_payload(exc):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, PipelineError):
        payload.update(error=type(exc.cause).__name__, message=str(exc.cause), stage=exc.stage)
        exc = exc.cause
    for attr in ("u0", "row"):
        val = getattr(exc, attr, None)
        if val is not None:
            payload[attr] = val
    return payload


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        spec = RunSpec(args.subcommand, args.input, args.config, args.out, args.h, args.level,
                       args.grid, args.seed)
        report = run_pipeline(spec)
        write_results(report, spec.out)
    except VCMMError as exc:
        print(json.dumps(_error_payload(exc), sort_keys=True), file=sys.stderr)
        return 1
    except Exception as exc:  # last resort: keep stderr machine-readable
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "internal": True}, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
