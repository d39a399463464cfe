"""Command-line scenario runner.

Exit codes: 0 ok, 2 config error, 3 early termination, 4 certificate failure.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .learning import EpisodicTrainingError, ResidualModel
from .scenario import learn_artifacts, simulate_artifacts, sweep_artifacts

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EARLY_TERMINATION = 3
EXIT_CERTIFICATE = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pssf",
        description="Safety-filtered rollouts, episodic residual learning, and "
                    "projection-to-state safety certificates.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="closed-loop run with certificates")
    sim.add_argument("--config", required=True, help="scenario YAML")
    sim.add_argument("--model", help="residual model JSON for the learned mode")
    sim.add_argument("--out", required=True, help="output directory")

    learn = sub.add_parser("learn", help="episodic residual training")
    learn.add_argument("--config", required=True)
    learn.add_argument("--out", required=True)

    sweep = sub.add_parser("sweep", help="simulate across one numeric config leaf")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--param", required=True, help="dotted config path, e.g. run.dt")
    sweep.add_argument("--values", required=True, help="comma-separated numbers")
    sweep.add_argument("--out", required=True)

    return parser


def _simulate_exit(summary: dict) -> int:
    modes = [summary["no_learning"]]
    if summary["learned"] is not None:
        modes.append(summary["learned"])
    if any(m["terminated_early"] for m in modes):
        return EXIT_EARLY_TERMINATION
    if any(not m["pass"] for m in modes):
        return EXIT_CERTIFICATE
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "simulate":
        model = None
        if args.model:
            try:
                model = ResidualModel.load(args.model)
            except (OSError, ValueError, KeyError) as exc:
                print(f"config error: cannot load model {args.model}: {exc}", file=sys.stderr)
                return EXIT_CONFIG
        summary = simulate_artifacts(cfg, args.out, model=model)
        code = _simulate_exit(summary)
        no_learn = summary["no_learning"]
        print(f"no_learning: delta_bar={no_learn['delta_bar']:.6g} floor={no_learn['floor']:.6g} "
              f"min_h={no_learn['min_h']:.6g} status={no_learn['status']}")
        if summary["learned"] is not None:
            lr = summary["learned"]
            print(f"learned:     delta_bar={lr['delta_bar']:.6g} floor={lr['floor']:.6g} "
                  f"min_h={lr['min_h']:.6g} status={lr['status']}")
        return code

    if args.command == "learn":
        try:
            summary = learn_artifacts(cfg, args.out)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except EpisodicTrainingError as exc:
            print(f"training failed: {exc}", file=sys.stderr)
            return EXIT_EARLY_TERMINATION
        print(f"no_learning delta_bar={summary['no_learning_delta_bar']:.6g} "
              f"final validation delta_bar={summary['final_validation_delta_bar']:.6g}")
        return EXIT_OK

    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as exc:
        print(f"config error: bad --values: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not values:
        print("config error: --values is empty", file=sys.stderr)
        return EXIT_CONFIG
    try:
        sweep_artifacts(cfg, args.param, values, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
