"""Command line entry point: ``etcrl {train,eval,sweep,baseline}``."""
from __future__ import annotations

import argparse
import sys

from . import harness
from .baselines import LAWS, max_stable_savings


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etcrl", description="Event-triggered control experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. ddpg.episodes=50; repeatable")

    sub.add_parser("train", parents=[common], help="train the configured approach for every seed")
    ev = sub.add_parser("eval", parents=[common], help="evaluate trained seeds or a fixed baseline")
    ev.add_argument("--checkpoint", help="directory holding seed_<s> checkpoints (default: the output directory)")
    ev.add_argument("--stochastic-gate", action="store_true", help="sample the gate instead of thresholding it")
    sw = sub.add_parser("sweep", parents=[common], help="lambda sweep (train+eval) or baseline threshold sweep")
    sw.add_argument("--axis", choices=("lambda", "delta"), required=True)
    bl = sub.add_parser("baseline", parents=[common], help="threshold sweeps of the triggered LQR")
    bl.add_argument("--law", choices=LAWS, action="append", help="law to sweep (default: all); repeatable")
    return parser


def load(args) -> harness.RunConfig:
    data = harness.load_config_data(args.config) if args.config else {}
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    if getattr(args, "stochastic_gate", False):
        overrides.append("eval_stochastic_gate=true")
    return harness.config_from_dict(harness.apply_overrides(data, overrides))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load(args)
    except (harness.ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "train":
            for seed, path in harness.run_training(cfg).items():
                print(f"seed {seed}: {path}")
        elif args.command == "eval":
            rows = harness.run_eval(cfg, args.checkpoint)
            for r in rows:
                if r.episode == -1:
                    print(f"seed {r.seed}: cost {r.mean_cost:.6g} comm {r.mean_comm:.3f} stable {r.stable:.2f}")
        elif args.command == "sweep":
            rows = harness.run_sweep(cfg, args.axis)
            failed = [r for r in rows if r.status != "ok"]
            print(f"{len(rows)} rows written to {cfg.out_dir}")
            if failed:
                print(f"{len(failed)} grid point(s) failed", file=sys.stderr)
                return 1
        else:
            for law, rows in harness.run_baseline(cfg, args.law).items():
                print(f"{law}: max stable savings {max_stable_savings(rows):.3f}")
    except harness.RunFailed as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (harness.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
