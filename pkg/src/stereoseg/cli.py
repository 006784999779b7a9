"""Command-line surface: data generation, training, evaluation, inference."""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from PIL import Image

from . import train as train_mod
from .config import PROFILES, TrainConfig, apply_settings, load_config_file
from .correlation import CameraIntrinsics
from .evaluation import EvalConfig
from .synthetic import generate_dataset, write_dataset
from .train import (
    adapt_checkpoint,
    evaluate_checkpoint,
    infer,
    load_checkpoint,
    write_inference_outputs,
)

# flags that override config-file values (flag > file > profile default)
_OVERRIDE_FLAGS = (
    "lr", "epochs", "batch_size", "seed", "num_queries", "query_processing",
    "single_rgb", "alpha", "beta", "gamma",
)


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    cfg = PROFILES[args.profile]()
    if args.config:
        cfg = apply_settings(cfg, load_config_file(args.config))
    overrides = {
        name: getattr(args, name)
        for name in _OVERRIDE_FLAGS
        if getattr(args, name, None) is not None
    }
    if overrides:
        cfg = apply_settings(cfg, overrides)
    return cfg


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--profile", choices=sorted(PROFILES), default="tiny",
                        help="named base configuration")
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key = value config file")
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--num-queries", dest="num_queries", type=int, default=None)
    parser.add_argument("--query-processing", dest="query_processing", default=None)
    parser.add_argument("--single-rgb", dest="single_rgb", action="store_const",
                        const=True, default=None)
    parser.add_argument("--alpha", type=float, default=None)
    parser.add_argument("--beta", type=float, default=None)
    parser.add_argument("--gamma", type=float, default=None)


def _cmd_generate_data(args: argparse.Namespace) -> int:
    from .config import scene_config

    cfg = _resolve_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    samples = generate_dataset(scene_config(cfg, seed), args.count, seed)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} scenes to {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    final = train_mod.train(cfg, args.data, args.out, resume_from=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    eval_cfg = EvalConfig(threshold=args.threshold, min_instance_area=args.min_area)
    summary, _ = evaluate_checkpoint(args.ckpt, args.data, eval_cfg, args.report)
    print(json.dumps(summary, indent=2))
    return 0


def _load_image(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def _cmd_infer(args: argparse.Namespace) -> int:
    intrinsics = None
    if args.focal_x is not None or args.baseline is not None:
        if args.focal_x is None or args.baseline is None:
            raise SystemExit("intrinsics adaptation needs both --focal-x and --baseline")
        intrinsics = CameraIntrinsics(args.focal_x, args.baseline)
    mask_logits, disparity = infer(
        args.ckpt,
        _load_image(args.left),
        _load_image(args.right),
        new_intrinsics=intrinsics,
        z_min=args.z_min,
    )
    write_inference_outputs(args.out, mask_logits, disparity)
    print(f"wrote masks.png and disparity.png to {args.out}")
    return 0


def _cmd_adapt(args: argparse.Namespace) -> int:
    import torch

    payload = load_checkpoint(args.ckpt)
    z_min = args.z_min
    if z_min is None:
        z_min = payload["config"]["z_min"]
    adapted = adapt_checkpoint(
        payload, CameraIntrinsics(args.focal_x, args.baseline), z_min
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    torch.save(adapted, args.out)
    print(f"wrote adapted checkpoint to {args.out}")
    print(json.dumps(adapted["correlation"], indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereoseg",
        description="Stereo instance segmentation: data generation, training, "
                    "evaluation and inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a procedural stereo dataset")
    _add_config_arguments(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _add_config_arguments(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint over a dataset")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--report", type=Path, default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-area", dest="min_area", type=float, default=25.0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="run one stereo pair through a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--left", type=Path, required=True)
    p.add_argument("--right", type=Path, required=True)
    p.add_argument("--focal-x", dest="focal_x", type=float, default=None)
    p.add_argument("--baseline", type=float, default=None)
    p.add_argument("--z-min", dest="z_min", type=float, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser(
        "adapt-intrinsics",
        help="rewrite the correlation grids of a checkpoint for new intrinsics",
    )
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--focal-x", dest="focal_x", type=float, required=True)
    p.add_argument("--baseline", type=float, required=True)
    p.add_argument("--z-min", dest="z_min", type=float, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_adapt)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
