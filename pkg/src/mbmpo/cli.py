"""Command-line harness: training runs and analysis experiments."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import harness, orchestrator
from .checkpoint import load_checkpoint


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field, e.g. run.alpha=0.001 or trpo.kl_bound=0.02",
    )


def _base_config(args) -> orchestrator.RunConfig:
    config = harness.load_config(args.config, args.overrides)
    if args.seed is not None:
        config.seed = args.seed
    return config


def _seeds(args, config) -> list[int]:
    base = config.seed
    return [base + i for i in range(args.n_seeds)]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mbmpo", description=__doc__)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", default="runs")
    parser.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the full training loop")
    _add_config_args(p_train)

    p_map = sub.add_parser("uncertainty-map", help="ensemble-std vs policy-KL grid map")
    p_map.add_argument("--checkpoint", required=True)
    p_map.add_argument("--resolution", type=int, default=20)
    p_map.add_argument("--csv", default=None)

    p_rob = sub.add_parser("robustness", help="bias robustness sweep vs the alpha=0 baseline")
    _add_config_args(p_rob)
    p_rob.add_argument("--b-max", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    p_rob.add_argument("--noise-std", type=float, default=0.1)
    p_rob.add_argument("--n-seeds", type=int, default=3)

    p_sweep = sub.add_parser("sweep", help="hyperparameter sweep along one axis")
    _add_config_args(p_sweep)
    p_sweep.add_argument("--axis", choices=harness.SWEEP_AXES, required=True)
    p_sweep.add_argument("--values", type=float, nargs="+", required=True)
    p_sweep.add_argument("--n-seeds", type=int, default=3)

    p_abl = sub.add_parser("ablate-exploration", help="tailored data collection ablation")
    _add_config_args(p_abl)
    p_abl.add_argument("--n-seeds", type=int, default=3)

    p_eval = sub.add_parser("eval", help="evaluate a checkpointed policy")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=100)

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            config = _base_config(args)
            _, records, _, _ = orchestrator.run(config, out_dir=args.out_dir, quiet=args.quiet)
            if not args.quiet:
                print(f"final average return: {records[-1].avg_return:.3f}")
        elif args.command == "uncertainty-map":
            grid = harness.uncertainty_map(
                args.checkpoint, resolution=args.resolution, csv_path=args.csv
            )
            print(f"spearman_rho={grid.spearman_rho!r}")
        elif args.command == "robustness":
            config = _base_config(args)
            harness.robustness_sweep(
                config,
                args.b_max,
                _seeds(args, config),
                args.out_dir,
                noise_std=args.noise_std,
                quiet=args.quiet,
            )
        elif args.command == "sweep":
            config = _base_config(args)
            values = [int(v) if args.axis != "alpha" else v for v in args.values]
            harness.sweep(config, args.axis, values, _seeds(args, config), args.out_dir,
                          quiet=args.quiet)
        elif args.command == "ablate-exploration":
            config = _base_config(args)
            results = harness.ablate_exploration(
                config, _seeds(args, config), args.out_dir, quiet=args.quiet
            )
            print(f"final_return_ratio={results['final_return_ratio']!r}")
        elif args.command == "eval":
            data = load_checkpoint(args.checkpoint)
            from .envs import make_env

            env = make_env(data["env_id"])
            seed = args.seed if args.seed is not None else 0
            rng = np.random.default_rng(np.random.SeedSequence(seed))
            avg, std = orchestrator.evaluate(data["policy"], env, args.episodes, rng)
            print(f"avg_return={avg!r} std_return={std!r}")
    except Exception as exc:  # machine-readable failure line, nonzero exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
