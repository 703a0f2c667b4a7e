"""Command line entry point: ``roomclear train|pretrain|eval|replay-check``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .floorplan import ScenarioError, load_scenario


def _hp(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"--hp expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roomclear", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scenario", required=True)
        sp.add_argument("--algo", default="feudal-tabular", choices=harness.ALGOS)
        sp.add_argument("--agents-mode", default="learned", choices=sorted(harness.AGENT_MODES))
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--hp", action="append", metavar="KEY=VALUE", help="hyperparameter override; prefix with commander./agent./joint. to scope it")
        sp.add_argument("--out", default="runs")
        sp.add_argument("--trace", action="store_true")
        sp.add_argument("--timing", action="store_true", help="record wall-clock time per episode (makes metrics non-reproducible)")
        sp.add_argument("--agent-checkpoint")
        sp.add_argument("--reward", help="override the scenario reward: sparse, default, civilian or death_penalty:<x>")

    tr = sub.add_parser("train", help="train a commander (and agents)")
    common(tr)
    tr.add_argument("--episodes", type=int, default=1000)
    tr.add_argument("--eval-episodes", type=int, default=0)
    tr.add_argument("--checkpoint-every", type=int, default=0)
    tr.add_argument("--pretrain-episodes", type=int, default=20_000)

    pt = sub.add_parser("pretrain", help="pre-train the shared agent policy on random orders")
    common(pt)
    pt.add_argument("--episodes", type=int, default=20_000)
    pt.add_argument("--threshold", type=float, default=0.95)

    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    common(ev)
    ev.add_argument("--checkpoint", action="append", required=True)
    ev.add_argument("--eval-episodes", type=int, default=10)

    rc = sub.add_parser("replay-check", help="re-simulate a trace and compare states")
    rc.add_argument("--scenario", required=True)
    rc.add_argument("--trace-file", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "replay-check":
            problems = harness.replay_check(load_scenario(args.scenario), harness.read_trace(args.trace_file))
            for line in problems:
                print(line)
            print("replay ok" if not problems else f"{len(problems)} mismatches")
            return 0 if not problems else 1

        config = harness.RunConfig(
            scenario=args.scenario,
            algo=args.algo,
            agents_mode=args.agents_mode,
            seed=args.seed,
            hp=_hp(args.hp),
            out=args.out,
            trace=args.trace,
            timing=args.timing,
            agent_checkpoint=args.agent_checkpoint,
            reward=args.reward,
            eval_episodes=getattr(args, "eval_episodes", 0),
            episodes=getattr(args, "episodes", 0),
        )
        if args.command == "train":
            config.checkpoint_every = args.checkpoint_every
            config.pretrain_episodes = args.pretrain_episodes
            trainer = harness.Trainer(config)
            history = harness.run_training(config, trainer=trainer)
            n = len(history)
            tail = history[-100:]
            print(f"{n} episodes, last-{len(tail)} success rate {sum(m.success for m in tail) / max(1, len(tail)):.3f}")
            if config.eval_episodes:
                print(json.dumps(harness.run_eval(config, trainer=trainer), indent=2, sort_keys=True))
        elif args.command == "pretrain":
            config.pretrain_episodes = args.episodes
            config.pretrain_threshold = args.threshold
            res = harness.pretrain_agents(config)
            print(f"{res.episodes} orders, rolling success {res.success_rate:.3f}, checkpoint {res.checkpoint}")
        elif args.command == "eval":
            print(json.dumps(harness.run_eval(config, args.checkpoint), indent=2, sort_keys=True))
    except (ScenarioError, harness.ConfigError, harness.CheckpointMismatch, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
