"""Command-line surface: train, denoise, eval, attnmap and census.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or format
error, 4 numeric failure (non-finite loss).
"""

import argparse
import os
import sys

import numpy as np

from .config import load_run_config
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .imageio import load_image, save_image
from .metrics import evaluate_pairs
from .network import build_weights, param_census, run_tiled
from .reporting import (
    fmt_real,
    render_eval_figure,
    render_heat_figure,
    render_loss_figure,
    write_distance_csv,
    write_eval_csv,
    write_loss_csv,
)
from .training import Checkpoint, load_checkpoint, save_checkpoint, train

_IMAGE_EXTS = (".pgm", ".ppm")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="colanet",
        description="collaborative-attention image restoration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True, help="run config path")
    p.add_argument("--out", help="output directory (default: paths.out_dir)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--sigma", type=float, help="override degrade.sigma")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="restore an image with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int, default=64)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM of test images against refs")
    p.add_argument("--ref", required=True, help="reference image or directory")
    p.add_argument("--test", required=True, help="test image or directory")
    p.add_argument("--out", default="eval.csv", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attnmap",
                       help="export per-block heat maps for an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cab", type=int,
                   help="also dump this block's distance matrix as CSV")
    p.add_argument("--tile", type=int, default=64)
    p.set_defaults(func=cmd_attnmap)

    p = sub.add_parser("census", help="print the parameter breakdown")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_census)
    return parser


def _list_images(directory):
    names = sorted(n for n in os.listdir(directory)
                   if n.lower().endswith(_IMAGE_EXTS))
    if not names:
        raise ConfigError(f"no .pgm/.ppm images in {directory!r}")
    return names


def cmd_train(args):
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.sigma is not None:
        cfg.degrade.sigma = args.sigma
    out_dir = args.out or cfg.paths.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    if not cfg.paths.data_dir:
        raise ConfigError("paths.data_dir must point at the training images")
    dataset = [load_image(os.path.join(cfg.paths.data_dir, n))
               for n in _list_images(cfg.paths.data_dir)]
    ckpt, curve = train(dataset, cfg.degrade, cfg.model, cfg.train,
                        out_dir=out_dir)
    write_loss_csv(os.path.join(out_dir, "loss.csv"), curve)
    render_loss_figure(os.path.join(out_dir, "loss.png"), curve)
    print(f"trained {ckpt.step} steps; final loss {fmt_real(curve[-1][2])}; "
          f"checkpoint in {out_dir}/ckpt_final.bin")
    return 0


def _overlap_for(tile):
    return min(16, max(tile // 4, 0))


def _restore(ckpt, image, tile):
    restored, _ = run_tiled(image / 255.0, ckpt.weights, ckpt.config,
                            tile=tile, overlap=_overlap_for(tile))
    return restored * 255.0


def cmd_denoise(args):
    ckpt = load_checkpoint(args.ckpt)
    image = load_image(args.in_path)
    save_image(_restore(ckpt, image, args.tile), args.out)
    print(f"wrote {args.out}")
    return 0


def _eval_pairs(ref, test):
    if os.path.isdir(ref) != os.path.isdir(test):
        raise ConfigError("--ref and --test must both be files or both dirs")
    if os.path.isdir(ref):
        names = _list_images(test)
        if set(names) - set(_list_images(ref)):
            raise ConfigError("test images missing from the reference dir")
        return [(n, load_image(os.path.join(ref, n)),
                 load_image(os.path.join(test, n))) for n in names]
    return [(os.path.basename(test), load_image(ref), load_image(test))]


def cmd_eval(args):
    report = evaluate_pairs(_eval_pairs(args.ref, args.test))
    write_eval_csv(args.out, report)
    base, _ = os.path.splitext(args.out)
    render_eval_figure(base + ".png", report)
    print(f"mean psnr {fmt_real(report.mean_psnr)} dB, "
          f"mean ssim {fmt_real(report.mean_ssim)}  -> {args.out}")
    return 0


def cmd_attnmap(args):
    ckpt = load_checkpoint(args.ckpt)
    image = load_image(args.in_path)
    if args.cab is not None and not 0 <= args.cab < ckpt.config.num_cab:
        raise ConfigError(f"--cab must lie in 0..{ckpt.config.num_cab - 1}")
    os.makedirs(args.out, exist_ok=True)
    _, tiles = run_tiled(image / 255.0, ckpt.weights, ckpt.config,
                         tile=args.tile, overlap=_overlap_for(args.tile),
                         want_traces=True)
    h, w = image.shape[-2], image.shape[-1]
    acc = np.zeros((ckpt.config.num_cab, h, w))
    cnt = np.zeros((h, w))
    for res in tiles:
        sl = (slice(res.row, res.row + res.height),
              slice(res.col, res.col + res.width))
        for trace in res.traces:
            acc[(trace.cab_index,) + sl] += trace.heat_values[0]
        cnt[sl] += 1.0
    maps = acc / cnt[None]
    panels = []
    for i in range(ckpt.config.num_cab):
        name = f"heat_cab{i}.pgm"
        save_image(maps[i] * 255.0, os.path.join(args.out, name))
        panels.append((f"cab {i}", maps[i]))
    render_heat_figure(os.path.join(args.out, "heatmaps.png"), panels)
    if args.cab is not None:
        first = tiles[0].traces[args.cab].distance_matrix[0]
        write_distance_csv(
            os.path.join(args.out, f"distance_cab{args.cab}.csv"), first)
    print(f"wrote {ckpt.config.num_cab} heat maps to {args.out}")
    return 0


def cmd_census(args):
    cfg = load_run_config(args.config)
    weights = build_weights(cfg.model, seed=0)
    total, breakdown = param_census(weights)
    for name, count in breakdown.items():
        print(f"{name:>8}  {count}")
    print(f"{'total':>8}  {total}")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
