"""``freqcodec`` command-line tool.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 model mismatch.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec, metrics
from .checkpoint import CheckpointError
from .codec import ModelMismatchError
from .container import Container, ContainerError, split_bit_allocation
from .fusion import FULL, SplitMask
from .imageio import ImageError, list_images, read_image
from .model import FrequencyCodec
from .rans import RansError
from .training import (
    TrainConfig,
    TrainingDiverged,
    split_holdout,
    train,
)
from .transform import PRESETS, ModelConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MISMATCH = 0, 2, 3, 4


def _splits(text: str) -> SplitMask:
    try:
        return SplitMask.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _model_config(value) -> ModelConfig:
    if value is None:
        return PRESETS["desk"]
    if value in PRESETS:
        return PRESETS[value]
    return ModelConfig.from_file(value)


def _load(args) -> FrequencyCodec:
    cfg = _model_config(args.config) if args.config else None
    return codec.load_model(args.checkpoint, cfg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_encode(args) -> int:
    model = _load(args)
    container = codec.encode_file(args.image, model, args.out, args.splits, args.parallel)
    print(f"{args.out}: {container.width}x{container.height} splits={container.mask} "
          f"bpp={container.bpp():.4f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load(args)
    img = codec.decode_file(args.container, model, args.out, args.splits)
    print(f"{args.out}: {img.width}x{img.height}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {k: v for k, v in (("lmbda", args.lmbda), ("metric", args.metric),
                                   ("seed", args.seed), ("max_iters", args.iters),
                                   ("lr", args.lr)) if v is not None}
    cfg = TrainConfig(**{**cfg.__dict__, **overrides})
    paths = list_images(args.data)
    if not paths:
        raise ImageError(f"no PPM/PNG images in {args.data}")
    train_paths, held_paths = split_holdout(paths, args.holdout, cfg.seed)
    images = [read_image(p) for p in train_paths]
    held = [read_image(p) for p in held_paths]
    model = FrequencyCodec(_model_config(args.model_config), seed=cfg.seed)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        result = train(model, images, cfg, eval_images=held, checkpoint_path=args.out,
                       csv_path=args.csv)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good checkpoint kept at {args.out}", file=sys.stderr)
        return EXIT_DATA
    last = result.reports[-1]
    print(f"{args.out}: iter {last.iteration} bpp {last.bpp:.4f} loss {last.loss:.4f} "
          f"psnr {last.psnr:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load(args)
    paths = list_images(args.data)
    if not paths:
        raise ImageError(f"no PPM/PNG images in {args.data}")
    rows = []
    for p in paths:
        img = read_image(p)
        container = codec.encode_image(model, img, args.splits)
        rec = codec.decode_container(model, container)
        score = metrics.ms_ssim(img.pixels, rec.pixels, 255.0)
        rows.append((p.name, container.bpp(), metrics.psnr(img.pixels, rec.pixels),
                     metrics.msssim_db(score)))
    means = ("mean",) + tuple(float(np.mean([r[i] for r in rows])) for i in (1, 2, 3))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["image", "bpp", "psnr", "msssim_db"])
        for row in rows + [means]:
            writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_analyze(args) -> int:
    img = read_image(args.image)
    report = metrics.psd_bands(img.pixels, args.bands)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_csv())
    container = None
    if args.container:
        container = Container.from_bytes(Path(args.container).read_bytes())
    elif args.checkpoint:
        model = _load(args)
        container = codec.encode_image(model, img)
        print("split reconstructions, band proportions:")
        for split, rec in codec.split_reconstructions(model, img).items():
            props = metrics.psd_bands(rec.pixels, args.bands).proportions
            print(f"{split}," + ",".join(f"{v:.4f}" for v in props))
    if container is not None:
        alloc = split_bit_allocation(container)
        print("split,proportion")
        for split, share in alloc.items():
            print(f"{split},{share:.6f}")
    return EXIT_OK


def cmd_count(args) -> int:
    if args.attention:
        macs, params = metrics.attention_complexity(args.channels, args.reduction, args.size)
        print(f"attention C={args.channels} r={args.reduction} input "
              f"[1,{args.channels},{args.size},{args.size}]: params {params} macs {macs}")
        return EXIT_OK
    model = FrequencyCodec(_model_config(args.config))
    report = metrics.branch_complexity(model, args.size)
    print(f"{'module':<20}{'params':>12}{'macs':>16}")
    macs, params = report["shared"]["sampler"]
    print(f"{'spatial sampler':<20}{params:>12}{macs:>16}")
    for split in ("low", "mid", "high"):
        for side in ("encoder", "decoder"):
            macs, params = report[split][side]
            print(f"{split + ' ' + side:<20}{params:>12}{macs:>16}")
    print(f"{'total params':<20}{model.num_parameters():>12}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freqcodec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def model_args(p, required=True):
        p.add_argument("--checkpoint", required=required, help="trained model checkpoint")
        p.add_argument("--config", help="model config file or preset name (desk, paper)")

    p = sub.add_parser("encode", help="compress an image into a container")
    p.add_argument("image")
    model_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", type=_splits, default=FULL, help="e.g. low,mid,high")
    p.add_argument("--parallel", action="store_true", help="encode substreams concurrently")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct an image from a container")
    p.add_argument("container")
    model_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", type=_splits, default=None, help="subset of the stored splits")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train a model on a directory of images")
    p.add_argument("data")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="training config file (key=value)")
    p.add_argument("--model-config", help="model config file or preset name")
    p.add_argument("--lambda", dest="lmbda", type=float)
    p.add_argument("--metric", choices=("mse", "ms-ssim"))
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--holdout", type=float, default=0.1, help="held-out fraction for eval")
    p.add_argument("--csv", help="write the RD report series here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-image bpp/PSNR/MS-SSIM over a directory")
    p.add_argument("data")
    model_args(p)
    p.add_argument("--splits", type=_splits, default=FULL)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="spectral bands and per-split bit allocation")
    p.add_argument("image")
    p.add_argument("--bands", type=int, default=3)
    p.add_argument("--container", help="report bit allocation of this container")
    model_args(p, required=False)
    p.add_argument("--out", help="write the band report CSV here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("count", help="parameter and MAC counts")
    p.add_argument("--attention", action="store_true", help="count the attention module only")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--reduction", type=int, default=8)
    p.add_argument("--size", type=int, default=16, help="input side (image side without --attention)")
    p.add_argument("--config", help="model config file or preset name")
    p.set_defaults(func=cmd_count)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "count" and not args.attention and args.size == 16:
        args.size = 256
    try:
        return args.func(args)
    except ModelMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ImageError, ContainerError, RansError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
