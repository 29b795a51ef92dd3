"""Command-line entry point: ``ptnlab {generate,train,distill,eval,reproduce}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .autodiff import NonFiniteError
from .classifier import TrainingDivergence
from .pipeline import ConfigError, RunConfig

logger = logging.getLogger("ptnlab")


def _on_off(value):
    v = value.lower()
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def _seed_list(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list: {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory (default: OUT/data)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ptnlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="render the synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train a baseline or normalizer-equipped model")
    p.add_argument("--ptn", type=_on_off, default=True, metavar="on|off")
    p = sub.add_parser("distill", parents=[common], help="label distillation from a trained checkpoint")
    p.add_argument("--mode", choices=("soft", "hard"), default="soft")
    p.add_argument("--rounds", type=int, help="maximum number of rounds")
    p.add_argument("--checkpoint", type=Path, help="default: OUT/checkpoints/ptn.ckpt")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="val", choices=("D_r", "D_s", "val", "test"))
    p = sub.add_parser("reproduce", parents=[common], help="full pipeline over several seeds")
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2, 3, 4], help="comma separated, e.g. 0,1,2")
    return parser


def resolve_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.data is not None:
        overrides["data_dir"] = args.data
    if getattr(args, "rounds", None) is not None:
        if args.rounds < 0:
            raise ConfigError("--rounds must be non-negative")
    if overrides:
        config = RunConfig.from_dict({**config.to_dict(), **overrides})
    if config.data_dir and args.command != "generate" and not Path(config.data_dir).exists():
        raise ConfigError(f"dataset directory not found: {config.data_dir}")
    config.out_dir.mkdir(parents=True, exist_ok=True)
    return config


def _threads():
    raw = os.environ.get("PTNLAB_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PTNLAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"PTNLAB_THREADS must be a positive integer, got {raw!r}")
    return n


def run(args):
    config = resolve_config(args)
    cmd = args.command
    if cmd == "generate":
        manifest = pipeline.generate(config)
        pipeline.snapshot(config, cmd)
        print(pipeline.summarize_dataset(manifest))
    elif cmd == "train":
        pipeline.snapshot(config, cmd)
        _, curve, summary = pipeline.train_stage(config, args.ptn)
        print(f"final loss {curve[-1]:.4f}; val accuracy {summary['accuracy']:.4f}, dAUC {summary['dauc']:.4f}")
    elif cmd == "distill":
        pipeline.snapshot(config, cmd)
        _, state, _ = pipeline.distill_stage(config, args.mode, args.checkpoint, args.rounds)
        for i, m in enumerate(state.val_metrics):
            print(f"round {i}: val accuracy {m['accuracy']:.4f}, dAUC {m['dauc']:.4f}")
        print(f"stopped: {state.stopped}")
    elif cmd == "eval":
        pipeline.snapshot(config, cmd)
        model = pipeline.load_model(args.checkpoint)
        manifest = pipeline._manifest(config)
        stem = args.checkpoint.stem
        summary = pipeline.evaluate_split(
            model, manifest, args.split,
            config.out_dir / "predictions" / f"{stem}_{args.split}.csv",
            config.out_dir / "metrics" / f"{stem}_{args.split}.json")
        for name in summary.get("skipped_splits", []):
            print(f"notice: dAUC split {name} skipped (one side empty)")
        print(json.dumps(summary, indent=2, sort_keys=True))
    elif cmd == "reproduce":
        pipeline.snapshot(config, cmd)
        result = pipeline.reproduce(config, args.seeds)
        print((config.out_dir / "report.md").read_text())
        if result["failures"]:
            return 1
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return run(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergence, NonFiniteError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
