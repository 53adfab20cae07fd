"""``microseg`` command-line entry point.

Errors are reported on stderr as one line ``error: <code>: <message>`` with exit status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .inference import TilingConfig
from .train import (RunError, cmd_evaluate, cmd_predict, cmd_profile, cmd_synth_data, profile_table,
                    train)
from .zoo import VARIANTS

EXIT_ERROR = 2


def _shape(text: str):
    parts = tuple(int(p) for p in text.lower().split("x"))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("input shape must look like 3x224x224")
    return parts


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--deterministic", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="microseg", description="Swin-UPerNet microscopy segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--resume", action="store_true", help="continue a partially written run")

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("auto", "pad", "tile"))

    p = sub.add_parser("predict", help="write mask and overlay for one image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", help="ground-truth mask drawn as a contour on the overlay")
    p.add_argument("--mode", choices=("auto", "pad", "tile"))

    p = sub.add_parser("profile", help="parameter and FLOP counts")
    _common(p)
    p.add_argument("--all", action="store_true", help="profile every variant")
    p.add_argument("--input-shape", type=_shape, default=(3, 224, 224))
    p.add_argument("--scale", choices=("paper", "tiny"), default="paper")

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--density", type=float, default=0.2)
    return parser


def _run_config(args):
    return load_config(args.config, variant=args.variant, seed=args.seed, out_dir=args.out,
                       deterministic=args.deterministic, dataset=getattr(args, "dataset", None))


def _tiling(args) -> TilingConfig:
    return load_config(args.config).tiling if args.config else TilingConfig()


def dispatch(args) -> None:
    if args.command == "train":
        record = train(_run_config(args), resume=args.resume)
        print(json.dumps({"epochs": len(record.epoch_losses), "final_loss": record.epoch_losses[-1],
                          "metrics": record.metrics, "checkpoints": record.checkpoints}))
    elif args.command == "evaluate":
        mode = args.mode or (load_config(args.config).eval_mode if args.config else "auto")
        report = cmd_evaluate(args.checkpoint, args.dataset, args.out or ".", _tiling(args), mode, args.variant)
        print(json.dumps(report.summary()))
    elif args.command == "predict":
        mode = args.mode or (load_config(args.config).eval_mode if args.config else "auto")
        paths = cmd_predict(args.checkpoint, args.image, args.out or ".", args.mask, mode, _tiling(args),
                            args.variant)
        print(json.dumps({k: str(v) for k, v in paths.items()}))
    elif args.command == "profile":
        if args.all:
            variants = list(VARIANTS)
        elif args.variant:
            variants = [v.strip() for v in args.variant.split(",")]
        else:
            raise RunError("give --variant NAME[,NAME...] or --all", code="usage")
        print(profile_table(cmd_profile(variants, args.input_shape, args.out, args.scale)))
    elif args.command == "synth-data":
        out = cmd_synth_data(args.n, args.size, args.seed or 0, args.out or "synthetic", args.density)
        print(json.dumps({"dataset": str(out), "n": args.n}))


def _code(exc: Exception) -> str:
    if isinstance(exc, RunError):
        return exc.code
    if isinstance(exc, ConfigError):
        return "bad_config"
    if isinstance(exc, CheckpointError):
        return "checkpoint_mismatch"
    if isinstance(exc, FileNotFoundError):
        return "not_found"
    if isinstance(exc, OSError):
        return "io_error"
    if isinstance(exc, ValueError):
        return "invalid_value"
    return "internal"


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        dispatch(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        message = " ".join(str(exc).split())
        print(f"error: {_code(exc)}: {message}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
