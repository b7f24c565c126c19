"""Command-line interface.

Subcommands:

    missoc fit <instance>        sample + fit the additive model
    missoc surrogate <instance>  print the surrogate MINLP as text
    missoc solve <instance>      solve the surrogate globally (no refinement)
    missoc run <instance>        full pipeline: fit, solve, refine
    missoc bench <instances...>  run the pipeline over several instances
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .bnb import solve as bnb_solve
from .bnb import write_log_csv
from .problems import (
    REPORT_CSV_HEADER,
    MissocConfig,
    load_instance,
    run_missoc,
    sample_training,
)
from .problems import fit_stage
from .regression import dump_model
from .surrogate import build_surrogate, export_text


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--degree", type=int, default=3, help="spline degree")
    p.add_argument(
        "--intervals", type=int, default=10, help="knot intervals per covariate"
    )
    p.add_argument(
        "--samples-per-param",
        type=int,
        default=15,
        help="training rows per model parameter",
    )
    p.add_argument("--seed", type=int, default=0, help="sampling seed")


def _add_solve_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--time-limit", type=float, default=600.0, help="wall-clock budget (s)"
    )
    p.add_argument(
        "--gap-tol", type=float, default=1e-4, help="relative optimality gap"
    )
    p.add_argument(
        "--node-cap", type=int, default=200_000, help="branch-and-bound node cap"
    )


def _config(args) -> MissocConfig:
    return MissocConfig(
        degrees=args.degree,
        intervals=args.intervals,
        samples_per_param=args.samples_per_param,
        seed=args.seed,
        time_limit=getattr(args, "time_limit", 600.0),
        gap_tol=getattr(args, "gap_tol", 1e-4),
        node_cap=getattr(args, "node_cap", 200_000),
        refine=not getattr(args, "no_refine", False),
    )


def _fit(instance, config):
    T = sample_training(instance, config)
    return T, fit_stage(instance, T, config)


def _write_plot_data(fit, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    for j, basis in enumerate(fit.bases):
        lo, hi = basis.domain
        xs = np.linspace(lo, hi, 401)
        ys = [fit.component(j, x) for x in xs]
        path = os.path.join(outdir, f"component_{basis.label}.csv")
        with open(path, "w") as fh:
            fh.write(f"{basis.label},component\n")
            for x, y in zip(xs, ys):
                fh.write(f"{x:.12g},{y:.12g}\n")


def cmd_fit(args) -> int:
    instance = load_instance(args.instance)
    config = _config(args)
    T, fit = _fit(instance, config)
    resid = np.array([fit.predict(row) for row in T.X]) - T.y
    print(f"instance         {instance.name}")
    print(f"covariates       {', '.join(b.label for b in fit.bases)}")
    print(f"training rows    {T.n}")
    print(f"intercept        {fit.intercept:.9g}")
    print(f"rms residual     {float(np.sqrt(np.mean(resid**2))):.6g}")
    print(f"max |residual|   {float(np.abs(resid).max()):.6g}")
    if args.model:
        with open(args.model, "w") as fh:
            fh.write(dump_model(fit))
        print(f"model written to {args.model}")
    if args.plot_data:
        _write_plot_data(fit, args.plot_data)
        print(f"component grids written to {args.plot_data}/")
    return 0


def cmd_surrogate(args) -> int:
    instance = load_instance(args.instance)
    config = _config(args)
    _, fit = _fit(instance, config)
    surrogate = build_surrogate(fit, instance)
    text = export_text(surrogate)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        print(f"surrogate written to {args.out}")
    else:
        print(text)
    print(
        f"# {surrogate.n_binaries} binaries, "
        f"{surrogate.n_auxiliaries} auxiliary variables",
        file=sys.stderr,
    )
    return 0


def cmd_solve(args) -> int:
    instance = load_instance(args.instance)
    config = _config(args)
    _, fit = _fit(instance, config)
    surrogate = build_surrogate(fit, instance)
    report = bnb_solve(
        surrogate,
        time_limit=config.time_limit,
        node_cap=config.node_cap,
        gap_tol=config.gap_tol,
        collect_log=bool(args.log),
    )
    print(f"status        {report.status}")
    if report.x is not None:
        point = ", ".join(
            f"{v.name}={xi:.9g}" for v, xi in zip(surrogate.variables, report.x)
        )
        print(f"incumbent     {point}")
        print(f"objective     {report.objective:.9g}")
    print(f"lower bound   {report.lower_bound:.9g}")
    print(f"gap           {report.gap_pct:.4g}%")
    print(f"nodes         {report.nodes}")
    print(f"time          {report.time_s:.3f}s")
    if args.log:
        write_log_csv(report, args.log)
        print(f"node log written to {args.log}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("objective,lower_bound,gap_pct,nodes,time_s,status\n")
            fh.write(report.csv_row() + "\n")
        print(f"summary written to {args.out}")
    return 0 if report.x is not None else 1


def _print_report(report) -> None:
    print(f"instance      {report.instance}")
    print(f"status        {report.status}")
    if report.x is not None:
        print(f"x*            {np.array2string(report.x, precision=9)}")
        print(f"objective     {report.objective:.9g}")
        print(f"surrogate obj {report.surrogate_objective:.9g}")
    print(f"gap           {report.gap_pct:.4g}%")
    print(f"nodes         {report.nodes}")
    for stage in ("sample", "fit", "surrogate", "solve", "refine"):
        if stage in report.stage_times:
            print(f"t[{stage:<9}] {report.stage_times[stage]:.3f}s")
    print(f"t[total    ] {report.total_time:.3f}s")


def cmd_run(args) -> int:
    instance = load_instance(args.instance)
    report = run_missoc(instance, _config(args))
    _print_report(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(REPORT_CSV_HEADER + "\n")
            for row in report.csv_rows():
                fh.write(row + "\n")
        print(f"report written to {args.out}")
    return 0 if report.x is not None else 1


def cmd_bench(args) -> int:
    rows = []
    failures = 0
    for path in args.instances:
        name = os.path.splitext(os.path.basename(path))[0]
        try:
            instance = load_instance(path)
            report = run_missoc(instance, _config(args))
        except Exception as exc:  # keep going over the rest of the batch
            print(f"{name}: ERROR {exc}", file=sys.stderr)
            rows.append(f"{name},error,,,,,,{type(exc).__name__}")
            failures += 1
            continue
        obj = f"{report.objective:.9g}" if report.x is not None else "-"
        print(
            f"{instance.name}: {report.status} obj={obj} "
            f"gap={report.gap_pct:.4g}% nodes={report.nodes} "
            f"time={report.total_time:.2f}s"
        )
        rows.extend(report.csv_rows())
        if report.x is None:
            failures += 1
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(REPORT_CSV_HEADER + "\n")
            for row in rows:
                fh.write(row + "\n")
        print(f"benchmark table written to {args.out}")
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="missoc",
        description=(
            "Approximate a complicating MINLP objective by a separable "
            "spline surrogate, solve it globally, refine locally."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="sample an instance and fit the model")
    p.add_argument("instance")
    _add_model_flags(p)
    p.add_argument("--model", help="write the fitted model to this file")
    p.add_argument(
        "--plot-data", help="write per-covariate component grid CSVs here"
    )
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("surrogate", help="print the surrogate MINLP")
    p.add_argument("instance")
    _add_model_flags(p)
    p.add_argument("--out", help="write the listing to this file")
    p.set_defaults(func=cmd_surrogate)

    p = sub.add_parser("solve", help="solve the surrogate (no refinement)")
    p.add_argument("instance")
    _add_model_flags(p)
    _add_solve_flags(p)
    p.add_argument("--out", help="write a one-line CSV summary here")
    p.add_argument("--log", help="write the node log CSV here")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser(
        "missoc", aliases=["run"], help="full pipeline: fit, solve, refine"
    )
    p.add_argument("instance")
    _add_model_flags(p)
    _add_solve_flags(p)
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--out", help="write the per-stage CSV report here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run the pipeline over several instances")
    p.add_argument("instances", nargs="+")
    _add_model_flags(p)
    _add_solve_flags(p)
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--out", help="write the combined CSV table here")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
