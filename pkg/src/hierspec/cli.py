"""Command-line entry point: ``hierspec <command> ...``."""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

from . import metrics
from .experiment import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_THEORY,
    FIGURES,
    Cell,
    ConfigError,
    SweepConfig,
    emit_figure_data,
    run_sweep,
    run_trial,
    sample_size,
)
from .teacher import TeacherSpec, sample_teacher
from .tensor_hermite import DeskScaleError


def _teacher_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-d", type=int, required=True, help="input dimension")
    p.add_argument("-q", type=int, default=2, help="Hermite degree")
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=0.4)
    p.add_argument("--readout", default="identity", help="identity, tanh or poly:c0,c1,...")
    p.add_argument("--direction-scale", default="unit", choices=("unit", "dq", "D"))
    p.add_argument("--rounding", default="floor", choices=("floor", "round", "ceil"))
    p.add_argument("--orthogonalize", action="store_true")
    p.add_argument("--fix-signs", action="store_true")
    p.add_argument("--seed", type=int, default=0)


def _teacher_template(args) -> dict:
    return {
        "q": args.q,
        "epsilon": args.epsilon,
        "gamma": args.gamma,
        "readout": args.readout,
        "direction_scale": args.direction_scale,
        "rounding": args.rounding,
        "orthogonalize": args.orthogonalize,
        "fix_signs": args.fix_signs,
    }


def cmd_generate(args) -> int:
    spec = TeacherSpec(d=args.d, seed=args.seed, **_teacher_template(args))
    text = sample_teacher(spec).to_json()
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_fit(args) -> int:
    config = SweepConfig(
        teacher=_teacher_template(args),
        d_list=(args.d,),
        alpha_grid=(args.alpha,),
        seeds=(args.seed,),
        n_test=args.n_test,
        hyper_grid=((args.degree, args.ridge),),
        solver=args.solver,
        dtype=args.dtype,
        bulk_edge=not args.no_bulk_edge,
        large=args.large,
    )
    if args.large:
        config = config.with_overrides(['solver="iterative"'])
    config.validate()
    result = run_trial(config, Cell(args.d, args.alpha, args.seed, (args.degree, args.ridge)))
    print(json.dumps(asdict(result), indent=1))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = SweepConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.set:
        config = config.with_overrides(args.set)
    if args.output_dir:
        config = config.with_overrides([f"output_dir={json.dumps(args.output_dir)}"])
    if args.large:
        config = config.with_overrides(["large=true", 'solver="iterative"'])
    outcome = run_sweep(config, resume=args.resume)
    print(f"{outcome.status}: {outcome.completed} rows -> {outcome.csv_path}")
    for key, why in sorted({**outcome.skipped, **outcome.failed}.items()):
        print(f"  {key}: {why}", file=sys.stderr)
    return outcome.exit_code


def cmd_thresholds(args) -> int:
    spec = TeacherSpec(d=args.d, q=args.q, epsilon=args.epsilon, gamma=args.gamma, rounding=args.rounding)
    d1 = spec.d1
    print(f"# d={args.d} q={args.q} gamma={args.gamma} d1={d1} c_thr={args.c_thr} d_eff={args.d_eff}")
    print("i,n_i,alpha_i")
    for i in range(1, d1 + 1):
        n_i = metrics.predicted_threshold(i, args.d, args.q, args.gamma, d1, args.c_thr, args.d_eff)
        print(f"{i},{n_i:.6g},{math.log(n_i) / math.log(args.d):.4f}")
    print("alpha,n,m_th,predicted_mse")
    for alpha in args.alpha:
        n = sample_size(args.d, alpha)
        m = metrics.predicted_count(n, args.d, args.q, args.gamma, d1, args.c_thr, args.d_eff)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", metrics.OutOfWindowWarning)
            try:
                mse = f"{metrics.predicted_mse(n, args.d, args.q, args.gamma, d1):.6g}"
            except ValueError:
                mse = ""
        print(f"{alpha},{n},{math.floor(m)},{mse}")
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    from .theory import theory_suite

    reports = theory_suite(seed=args.seed, slow=args.slow)
    ok = True
    for rep in reports:
        name = getattr(rep, "name", None) or rep.quantity
        print(f"{'PASS' if rep.passed else 'FAIL'} {name}")
        ok = ok and rep.passed
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_dict() for r in reports], indent=1, default=float))
    return EXIT_OK if ok else EXIT_THEORY


def cmd_figures(args) -> int:
    for path in emit_figure_data(args.results, args.figure, args.out):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierspec", description="Hierarchical spectral learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a teacher and write it as JSON")
    _teacher_args(p)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="run one trial and print its metrics")
    _teacher_args(p)
    p.add_argument("--alpha", type=float, required=True, help="n = floor(d ** alpha)")
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--ridge", type=float, default=1e-5)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--solver", default="dense", choices=("dense", "iterative"))
    p.add_argument("--dtype", default="float64", choices=("float64", "float32"))
    p.add_argument("--no-bulk-edge", action="store_true")
    p.add_argument("--large", action="store_true", help="allow D > 2080 with the iterative solver")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep", help="run a sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--set", nargs="*", metavar="PATH=VALUE", help="override config fields by dotted path")
    p.add_argument("--output-dir")
    p.add_argument("--large", action="store_true", help="allow D > 2080 with the iterative solver")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("thresholds", help="print predicted thresholds and counts")
    p.add_argument("-d", type=int, required=True)
    p.add_argument("-q", type=int, default=2)
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=0.4)
    p.add_argument("--rounding", default="floor", choices=("floor", "round", "ceil"))
    p.add_argument("--c-thr", type=float, default=1.0)
    p.add_argument("--d-eff", default="dq", choices=("dq", "B"))
    p.add_argument("--alpha", type=float, nargs="*", default=[1.5, 2.0, 2.5, 3.0, 3.5])
    p.set_defaults(func=cmd_thresholds)

    p = sub.add_parser("verify-theory", help="run the Monte-Carlo oracle suite")
    p.add_argument("--slow", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write the reports to this path")
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("figures", help="emit plot-ready CSVs from sweep results")
    p.add_argument("--results", required=True)
    p.add_argument("--figure", required=True, choices=FIGURES)
    p.add_argument("--out", default="figures")
    p.set_defaults(func=cmd_figures)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DeskScaleError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
