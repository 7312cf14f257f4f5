"""Command-line runner: problem files in, bounds reports and traces out.

Four modes: ``single`` solves once on the largest uniform refinement
inside the dof budget, ``adaptive`` runs the solve-estimate-mark-refine
loop, ``homotopy`` walks a nested-domain plan file, and
``synthetic-validate`` stress-tests the bound formulas on random matrix
pencils.  Runs write ``report.json`` into ``--out``; mesh runs add
``trace.csv`` and the final mesh.  All numbers are printed with 12
significant digits, so identical configs reproduce identical files.

Exit codes: 0 success, 1 configuration error (bad flags, unreadable or
inconsistent input files), 2 numerical failure (solver breakdown, failed
separation, synthetic violations), diagnostics on the error stream.
"""

import argparse
import json
import os
import sys

from .assembly import AssemblyError
from .bounds import BoundsError
from .driver import (AdaptiveConfig, DriverError, adapt, load_plan,
                     run_homotopy, single_run)
from .eigensolve import EigensolveError
from .estimator import EstimatorError
from .flux import FluxError
from .mesh import MeshError, write_mesh
from .problem import ProblemError, load_problem
from .synthetic import run_validation


class CliError(Exception):
    pass


CONFIG_ERRORS = (CliError, OSError, ProblemError, MeshError, DriverError,
                 BoundsError)
RUN_ERRORS = (DriverError, EigensolveError, FluxError, EstimatorError,
              BoundsError, MeshError, AssemblyError)


class _Parser(argparse.ArgumentParser):
    """Flag problems are configuration errors, not usage aborts."""

    def error(self, message):
        raise CliError(message)


def build_parser():
    parser = _Parser(prog="eigenbounds",
                     description=__doc__.split("\n\n")[0])
    parser.add_argument("--problem", metavar="FILE",
                        help="problem file: geometry, boundary, regions")
    parser.add_argument("--plan", metavar="FILE",
                        help="homotopy plan file (homotopy mode)")
    parser.add_argument("--mode", default="adaptive",
                        choices=["single", "adaptive", "homotopy",
                                 "synthetic-validate"])
    parser.add_argument("--eigs", default="1:1", metavar="R:S",
                        help="index range of reported eigenvalues")
    parser.add_argument("--theta", type=float, default=0.5,
                        help="bulk marking fraction")
    parser.add_argument("--max-dofs", type=int, default=100000)
    parser.add_argument("--nu", type=float, default=None,
                        help="fixed shift; switches the report to "
                             "fixed-nu mode with provenance 'user'")
    parser.add_argument("--lambda1-lower", type=float, default=None,
                        help="certified lower bound for the first "
                             "eigenvalue, sharpens the estimator")
    parser.add_argument("--out", default=".", metavar="DIR",
                        help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--trials", type=int, default=1000,
                        help="synthetic-validate sample count")
    return parser


def _parse_eigs(text):
    try:
        first, last = (int(p) for p in str(text).split(":"))
    except ValueError:
        raise CliError(f"eigs must look like 'r:s', got {text!r}")
    return first, last


def _config(args):
    first, last = _parse_eigs(args.eigs)
    mode = "combination" if args.nu is None else "fixed-nu"
    return AdaptiveConfig(first=first, last=last, theta=args.theta,
                          max_dofs=args.max_dofs, mode=mode, nu=args.nu,
                          nu_provenance=None if args.nu is None else "user",
                          lambda1_lower=args.lambda1_lower, seed=args.seed)


def _round12(obj):
    """12 significant digits on every float, recursively."""
    if isinstance(obj, float):
        return float("%.12g" % obj)
    if isinstance(obj, dict):
        return {key: _round12(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round12(value) for value in obj]
    return obj


def _write_outputs(out_dir, payload, trace=None):
    if trace is not None and trace.entries:
        trace.write_csv(os.path.join(out_dir, "trace.csv"))
        if trace.final_mesh is not None:
            write_mesh(trace.final_mesh,
                       os.path.join(out_dir, "mesh_final.txt"))
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(_round12(payload), fh, indent=2)
        fh.write("\n")


def _print_report(report):
    if report.nu0 is not None:
        print("nu0 = %.12g" % report.nu0)
    for row in report.rows:
        kato = "" if row.kato is None else " kato=%.12g" % row.kato
        tail = " guaranteed" if row.guaranteed else ""
        print("n=%d: lower=%.12g upper=%.12g eta=%.12g%s%s"
              % (row.n, row.lower, row.upper, row.eta, kato, tail))


def _trace_payload(trace):
    final = trace.final
    return {"iterations": len(trace.entries), "final_dofs": final.dofs,
            "num_triangles": final.num_triangles,
            "seconds": float(sum(e.seconds for e in trace.entries)),
            "report": final.report.to_dict()}


def _finish_mesh_run(args, out_dir, trace):
    payload = {"mode": args.mode, "problem": args.problem,
               "seed": args.seed}
    payload.update(_trace_payload(trace))
    if trace.failure is not None:
        payload["failure"] = trace.failure
    _write_outputs(out_dir, payload, trace=trace)
    print("%s: %d iterations, %d dofs" % (args.mode, len(trace.entries),
                                          trace.final.dofs))
    _print_report(trace.final.report)
    if trace.failure is not None:
        print(f"error: {trace.failure}", file=sys.stderr)
        return 2
    return 0


def _finish_homotopy(args, out_dir, result):
    stages = []
    for stage in result.stages:
        entry = {"label": stage.label, "nu": stage.nu,
                 "nu_provenance": stage.nu_provenance,
                 "report": stage.report.to_dict()}
        if stage.trace is not None:
            entry["iterations"] = len(stage.trace.entries)
            entry["final_dofs"] = stage.trace.final.dofs
        stages.append(entry)
        dofs = "" if stage.trace is None \
            else ", %d dofs" % stage.trace.final.dofs
        nu = "analytic" if stage.nu is None else "nu=%.12g" % stage.nu
        print("[%s] %s%s" % (stage.label, nu, dofs))
    payload = {"mode": "homotopy", "plan": args.plan, "stages": stages,
               "report": result.final_report.to_dict()}
    _write_outputs(out_dir, payload, trace=result.stages[-1].trace)
    _print_report(result.final_report)
    return 0


def _finish_synthetic(args, out_dir, result):
    payload = {"mode": "synthetic-validate", "trials": result.trials,
               "seed": args.seed, "ok": result.ok,
               "summary": result.summary(),
               "checks": {"kato": result.kato_checks,
                          "weinstein": result.weinstein_checks,
                          "distance": result.distance_checks},
               "violations": result.violations}
    _write_outputs(out_dir, payload)
    print(result.summary())
    if not result.ok:
        print("error: synthetic validation found violations",
              file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        out_dir = args.out
        os.makedirs(out_dir, exist_ok=True)
        if args.mode in ("single", "adaptive"):
            if args.problem is None:
                raise CliError(f"--mode {args.mode} needs --problem")
            spec = load_problem(args.problem)
            config = _config(args)
        elif args.mode == "homotopy":
            if args.plan is None:
                raise CliError("--mode homotopy needs --plan")
            plan = load_plan(args.plan)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.mode == "adaptive":
            return _finish_mesh_run(args, out_dir, adapt(spec, config))
        if args.mode == "single":
            return _finish_mesh_run(args, out_dir, single_run(spec, config))
        if args.mode == "homotopy":
            return _finish_homotopy(args, out_dir, run_homotopy(plan))
        return _finish_synthetic(
            args, out_dir, run_validation(trials=args.trials,
                                          seed=args.seed))
    except RUN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
