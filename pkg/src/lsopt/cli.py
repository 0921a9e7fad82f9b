"""Command-line driver: run benchmark experiments, emit data files and figures.

Exit codes: 0 on success, 1 on solver failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiments
from .linalg import LinearSolveError
from .vi_solver import ActiveSetError


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lsopt",
        description="least-squares finite elements for distributed optimal control",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one benchmark experiment")
    run.add_argument("experiment", choices=experiments.experiment_names())
    run.add_argument("--n0", type=int, default=None, help="initial mesh subdivisions per side")
    group = run.add_mutually_exclusive_group()
    group.add_argument("--levels", type=int, default=None, help="number of refinement levels")
    group.add_argument("--max-dofs", type=int, default=None, help="stop once dofs exceed this")
    run.add_argument("--theta", type=float, default=None, help="bulk marking parameter")
    run.add_argument("--gamma", type=float, default=None, help="least-squares weight")
    run.add_argument("--mode", choices=("uniform", "adaptive"), default=None)
    run.add_argument("--out", default=None, help="write the convergence data file here")
    run.add_argument("--figure", nargs="?", const="", default=None, metavar="PATH",
                     help="render a convergence figure (default: next to --out)")
    run.add_argument("--print-config", action="store_true",
                     help="print the resolved configuration and exit")
    run.add_argument("--verbose", action="store_true")

    report = sub.add_parser("report", help="render figures from emitted data files")
    report.add_argument("datafiles", nargs="+", help="data files written by `lsopt run`")
    report.add_argument("--out", default=None,
                        help="figure path (single input only; default: next to the input)")
    return parser


def _figure_path(args):
    if args.figure is None:
        return None
    if args.figure:
        return args.figure
    if args.out:
        from .plotting import default_figure_path

        return default_figure_path(args.out)
    return f"{args.experiment}.png"


def cmd_run(args):
    if args.print_config:
        cfg = experiments.resolve_config(
            args.experiment, n0=args.n0, levels=args.levels, max_dofs=args.max_dofs,
            theta=args.theta, gamma=args.gamma, mode=args.mode,
        )
        sys.stdout.write(experiments.format_config(cfg))
        return 0
    result = experiments.run(
        args.experiment, n0=args.n0, levels=args.levels, max_dofs=args.max_dofs,
        theta=args.theta, gamma=args.gamma, mode=args.mode, out=args.out,
    )
    figure = _figure_path(args)
    if figure:
        from .plotting import render_convergence

        columns = {
            "dofLSQ": [r.n_dofs for r in result.records],
            "estLSQ": [r.estimate for r in result.records],
            "errState": [r.err_state for r in result.records],
            "errAdjoint": [r.err_adjoint for r in result.records],
            "errU": [r.err_u for r in result.records],
            "errU0": [r.err_u0 for r in result.records],
        }
        render_convergence(columns, figure, title=args.experiment)
        print(f"figure written to {figure}")
    return 0


def cmd_report(args):
    from .plotting import default_figure_path, render_convergence

    if args.out and len(args.datafiles) != 1:
        print("--out applies to a single data file", file=sys.stderr)
        return 2
    for datafile in args.datafiles:
        columns = experiments.parse_datafile(datafile)
        figure = args.out or default_figure_path(datafile)
        render_convergence(columns, figure, title=datafile)
        print(f"figure written to {figure}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_report(args)
    except (LinearSolveError, ActiveSetError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, PermissionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
