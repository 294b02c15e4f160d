"""Command line entry point: ``diverse-inpaint <subcommand> ...``."""

import argparse
import os
import sys

import torch

from .core import TrainConfig, load_config, seeded_rng
from .data import ingest_dataset, load_image, make_toy_faces, save_image
from .masks import load_mask_file, save_mask_file
from .coarse import mask_params_from_config, sample_masks
from .pipeline import (
    Pipeline, PipelineError, evaluate, explore, run_train_coarse, run_train_latent,
    run_train_stage3, write_completions,
)

VARIANTS = ("sparn", "spade_decoder", "no_rn")


def _common(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="run directory (checkpoints, logs, outputs)")


def _data(p):
    p.add_argument("--data", help="image folder (overrides data_dir)")


def _image_args(p):
    p.add_argument("--image", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--mask", help="8-bit mask image, >=128 means valid")
    group.add_argument("--mask-auto", action="store_true", help="sample a stroke+square mask from --seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diverse-inpaint")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train-coarse", "train-latent", "train"):
        p = sub.add_parser(name)
        _common(p)
        _data(p)
        if name == "train":
            p.add_argument("--variant", choices=VARIANTS)

    p = sub.add_parser("infer")
    _common(p)
    _image_args(p)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--magnitude", type=float, help="delta range; default from config")
    p.add_argument("--variant", choices=VARIANTS)

    p = sub.add_parser("explore")
    _common(p)
    _image_args(p)
    p.add_argument("--direction", type=int, default=0)
    p.add_argument("--delta-min", type=float, default=-3.0)
    p.add_argument("--delta-max", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--variant", choices=VARIANTS)

    p = sub.add_parser("evaluate")
    _common(p)
    _data(p)
    p.add_argument("--variant", choices=VARIANTS)

    p = sub.add_parser("make-toy-data", help="write procedurally drawn toy faces")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    changes = {}
    if getattr(args, "data", None):
        changes["data_dir"] = args.data
    if getattr(args, "variant", None):
        changes["variant"] = args.variant
    return cfg.replace(**changes) if changes else cfg


def _dataset(cfg):
    if not cfg.data_dir:
        raise PipelineError("no data directory: pass --data or set data_dir")
    return ingest_dataset(cfg.data_dir, cfg.resolution, cfg.train_split)


def _image_and_mask(args, cfg):
    image = load_image(args.image, cfg.resolution)
    if args.mask:
        mask = load_mask_file(args.mask, cfg.resolution)
    else:
        mask = sample_masks(1, cfg.resolution, mask_params_from_config(cfg), seeded_rng(args.seed))
    return image, mask


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.use_deterministic_algorithms(True)

    if args.command == "make-toy-data":
        make_toy_faces(args.out, args.n, args.resolution, args.seed)
        return 0

    try:
        cfg = _config(args)
        out = args.out
        os.makedirs(out, exist_ok=True)
        if args.command == "train-coarse":
            run_train_coarse(_dataset(cfg).train, cfg, args.seed, out)
        elif args.command == "train-latent":
            run_train_latent(_dataset(cfg).train, cfg, args.seed, out)
        elif args.command == "train":
            result = run_train_stage3(_dataset(cfg).train, cfg, args.seed, out)
            start, end = result.eval_hole_l1
            print(f"hole L1 {start:.4f} -> {end:.4f}")
        elif args.command == "infer":
            pipe = Pipeline.load(cfg, out)
            image, mask = _image_and_mask(args, cfg)
            magnitude = cfg.delta_magnitude if args.magnitude is None else args.magnitude
            outs = pipe.infer(image, mask, args.n, magnitude, seeded_rng(args.seed))
            target = os.path.join(out, "infer")
            write_completions(outs, target)
            save_image(image * mask, os.path.join(target, "masked.png"))
            save_mask_file(mask, os.path.join(target, "mask.png"))
        elif args.command == "explore":
            pipe = Pipeline.load(cfg, out)
            image, mask = _image_and_mask(args, cfg)
            path = os.path.join(out, "explore", f"direction_{args.direction}.png")
            explore(pipe, image, mask, args.direction, args.delta_min, args.delta_max, args.steps, path)
        elif args.command == "evaluate":
            pipe = Pipeline.load(cfg, out)
            data = _dataset(cfg)
            images = data.test if data.test.shape[0] else data.train
            table = evaluate(pipe, images, cfg, seeded_rng(args.seed), os.path.join(out, "eval"))
            sys.stdout.write(table.to_text())
    except (PipelineError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
