"""Command-line front end: ``goal-calib <experiment> --config <file>``.

Exit codes: 0 on success, 2 for configuration problems, 3 for solver or
runner failures (the failed phase is printed). All artifacts are UTF-8 with
LF line endings.
"""

import argparse
import sys
from dataclasses import replace

from .config import ConfigError, load_config
from .runner import EXPERIMENTS, ExperimentError, run_experiment


def build_parser():
    parser = argparse.ArgumentParser(
        prog="goal-calib",
        description=(
            "Goal-oriented error estimation and error-driven Bayesian "
            "calibration for coarse/fine PDE model pairs."
        ),
    )
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name, text in (
        ("verify", "tabulate the error estimates against a fine-solve reference"),
        ("order-study", "drive the estimators along a model-mismatch homotopy"),
        ("calibrate", "run the Metropolis chains and write posterior artifacts"),
    ):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", required=True, help="path to the YAML run config")
        cmd.add_argument("--seed", type=int, default=None, help="override mcmc.seed")
        cmd.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("mcmc.seed", f"must be >= 0, got {args.seed}")
            config = replace(config, seed=args.seed)
    except FileNotFoundError as exc:
        print(f"goal-calib: config file not found: {exc.filename}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"goal-calib: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # malformed YAML and friends
        print(f"goal-calib: could not parse config: {exc}", file=sys.stderr)
        return 2

    try:
        manifest = run_experiment(config, args.experiment, output_dir=args.out)
    except ExperimentError as exc:
        print(f"goal-calib: {exc}", file=sys.stderr)
        return 3
    out = args.out if args.out is not None else config.output
    print(f"{args.experiment}: wrote {len(manifest.artifacts)} artifacts to {out}")
    for name in sorted(manifest.artifacts):
        print(f"  {name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
