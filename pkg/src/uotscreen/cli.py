"""Command line entry point.

Exit codes: 0 success, 2 parse error, 3 unsupported combination,
4 non-convergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import UnsupportedError
from .harness import (ExperimentPlan, IDXParseError, gen_gaussian_pair, load_mnist_idx,
                      load_problem, run_experiment, save_problem, write_trace)
from .screening import METHODS
from .solvers import SOLVERS, SolverConfig, run_with_screening

EXIT_OK, EXIT_PARSE, EXIT_UNSUPPORTED, EXIT_NONCONVERGED = 0, 2, 3, 4


def _cmd_gen_gauss(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.pairs):
        spec = gen_gaussian_pair(args.bins, args.seed + k, args.lam)
        save_problem(spec, out / f"gauss_{args.bins}_{args.seed + k}.json")
    return EXIT_OK


def _cmd_solve(args) -> int:
    spec = load_problem(args.problem)
    spec = spec.replace(
        penalty=args.penalty or spec.penalty,
        lam=spec.lam if args.lam is None else args.lam,
        epsilon=spec.epsilon if args.epsilon is None else args.epsilon)
    config = SolverConfig(args.solver, max_iters=args.max_iters, gap_tol=args.gap_tol,
                          screen_period=args.period, screen_method=args.screen)
    result = run_with_screening(spec, config)
    if args.trace:
        write_trace(result.trace, args.trace)
    last = result.trace[-1]
    print(json.dumps({"converged": result.converged, "iters": result.n_iter,
                      "primal": last.primal, "dual": last.dual, "gap": last.gap,
                      "screened": last.screened, "size": spec.n * spec.m}))
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def _cmd_bench(args) -> int:
    try:
        plan = ExperimentPlan.from_dict(json.loads(Path(args.plan).read_text()))
    except json.JSONDecodeError as exc:
        raise IDXParseError(f"invalid plan JSON: {exc.msg}", exc.pos) from exc
    summary = run_experiment(plan, args.out)
    print(json.dumps(summary["speedup"], indent=1))
    return EXIT_OK


def _cmd_mnist(args) -> int:
    spec = load_mnist_idx(args.images, args.labels, args.a, args.b, args.lam)
    save_problem(spec, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uotscreen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-gauss", help="write Gaussian histogram pairs as problem files")
    g.add_argument("--bins", type=int, default=100)
    g.add_argument("--pairs", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--lambda", dest="lam", type=float, default=0.1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_gauss)

    s = sub.add_parser("solve", help="solve one problem file")
    s.add_argument("--problem", required=True)
    s.add_argument("--penalty", choices=["l2", "kl", "tv"])
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--solver", choices=SOLVERS, default="fista")
    s.add_argument("--screen", choices=METHODS, default="none")
    s.add_argument("--gap-tol", type=float, default=1e-7)
    s.add_argument("--period", type=int, default=10)
    s.add_argument("--max-iters", type=int, default=100_000)
    s.add_argument("--trace")
    s.set_defaults(func=_cmd_solve)

    b = sub.add_parser("bench", help="run an experiment plan")
    b.add_argument("--plan", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=_cmd_bench)

    m = sub.add_parser("mnist", help="build a problem file from two MNIST images")
    m.add_argument("--images", required=True)
    m.add_argument("--labels")
    m.add_argument("--a", type=int, required=True)
    m.add_argument("--b", type=int, required=True)
    m.add_argument("--lambda", dest="lam", type=float, default=0.1)
    m.add_argument("--out", required=True)
    m.set_defaults(func=_cmd_mnist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UnsupportedError as exc:
        print(f"unsupported: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except (IDXParseError, ValueError, KeyError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
