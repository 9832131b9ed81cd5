"""Command line interface: ``frl run | gen-env | validate | analyze``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .core import SizeError, ValidationError, flatten, load, save, validate
from .solve import ConvergenceError, EvaluationError, diameter, factored_span, solve_average_reward

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="frl", description="Online learning in factored MDPs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a multi-seed experiment from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--out", default=None)

    gen = sub.add_parser("gen-env", help="write a benchmark environment to a JSON file")
    gen.add_argument("--topology", required=True, choices=["circle", "three-leg", "jao", "product-circle"])
    gen.add_argument("--size", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    val = sub.add_parser("validate", help="check an FMDP file")
    val.add_argument("path")

    ana = sub.add_parser("analyze", help="print size, diameter, optimal gain and spans")
    ana.add_argument("path")
    ana.add_argument("--cap", type=float, default=1e6)
    return parser


def _cmd_run(args) -> int:
    from .harness import load_config, run_experiment

    cfg = load_config(args.config)
    result = run_experiment(cfg, out_dir=args.out, workers=args.workers)
    print(f"optimal gain {result.gain:.12g}")
    for entry in result.summary["groups"]:
        print(f"{entry['agent']} param={entry['param']:g}: median final regret {entry['median_final_regret']:.6g}")
    print(f"results in {result.out_dir}")
    return EXIT_OK


def _cmd_gen_env(args) -> int:
    from .harness import build_env

    mdp = build_env(args.topology, args.size, args.seed)
    save(mdp, args.out)
    print(f"wrote {mdp.name} ({mdp.num_states} states, {mdp.num_actions} actions) to {args.out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    mdp = load(args.path)
    problems = validate(mdp)
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return EXIT_INVALID
    print(f"{args.path}: ok ({mdp.num_states} states, {mdp.num_actions} actions)")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    mdp = load(args.path)
    problems = validate(mdp)
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return EXIT_INVALID
    flat = flatten(mdp)
    report = solve_average_reward(flat)
    profile = factored_span(report.bias, mdp.spec.state_factor_sizes)
    d = diameter(flat, args.cap)
    info = {
        "S": mdp.num_states,
        "A": mdp.num_actions,
        "L": mdp.scope_bound,
        "W": mdp.spec.max_factor_size,
        "D": "infinite" if d.infinite else d.value,
        "gain": report.gain,
        "span": profile.span,
        "Q": profile.q,
    }
    for key, value in info.items():
        shown = value if isinstance(value, (int, str)) else f"{value:.12g}"
        print(f"{key}: {shown}")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "gen-env": _cmd_gen_env, "validate": _cmd_validate, "analyze": _cmd_analyze}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, json.JSONDecodeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SizeError, ConvergenceError, EvaluationError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
