"""Command-line entry point.

Exit codes: 0 success, 1 internal invariant violation, 2 user or input error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, metrics
from .config import RunConfig, schema_help
from .distill import sar_to_rgb, train_alignment, write_loss_csv as write_distill_csv
from .encoder import EncoderWeights
from .errors import ConfigError, InputError, OvsegError
from .ovhead import load_vocabulary, segment_argmax
from .pipeline import Segmenter, resize_long_side, slide_inference
from .raster import (Raster, SegmentationMask, colorize, load_mask, load_raster, save_mask,
                     save_raster)
from .toydata import write_toy_workspace
from .upsampler import UpsamplerParams, train_simfeatup, write_loss_csv as write_upsampler_csv


class Context:
    def __init__(self, args: argparse.Namespace):
        self.workdir = Path(args.workdir)
        overrides = {}
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        for flag, key in (("seed", "seed"), ("gamma", "train.gamma"), ("k", "distill.k"),
                          ("lam", "infer.lambda")):
            value = getattr(args, flag, None)
            if value is not None:
                overrides[key] = str(value)
        cfg_path = self.path(args.config) if args.config else None
        self.cfg = RunConfig.load(cfg_path, overrides)

    def path(self, rel) -> Path:
        return self.workdir / rel

    def output(self, rel) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def existing(self, key_or_path, what: str) -> Path:
        rel = self.cfg[key_or_path] if key_or_path in self.cfg.values else key_or_path
        if not rel:
            raise InputError(f"{what}: no path configured ({key_or_path})")
        p = self.path(rel)
        if not p.exists():
            raise InputError(f"{what} not found: {p}")
        return p

    def encoder(self, key: str = "paths.encoder") -> EncoderWeights:
        return EncoderWeights.load(self.existing(key, "encoder weights"), self.cfg.encoder())


def _image_float(r: Raster, channels: int, what: str) -> np.ndarray:
    if r.channels != channels:
        raise InputError(f"{what}: expected {channels}-channel raster, got {r.channels}")
    return r.to_float()


def cmd_train_upsampler(ctx: Context, args) -> int:
    corpus_dir = ctx.existing("paths.corpus", "image corpus")
    files = sorted(corpus_dir.glob("*.ppm"))
    if not files:
        raise InputError(f"no .ppm images in {corpus_dir}")
    corpus = [_image_float(load_raster(f), 3, str(f)) for f in files]
    enc_cfg = ctx.cfg.encoder()
    encoder = ctx.encoder()
    params, history = train_simfeatup(corpus, encoder, enc_cfg, ctx.cfg.train(),
                                      jbu_kwargs=ctx.cfg.jbu_kwargs())
    params.save(ctx.output(ctx.cfg["paths.upsampler"]))
    write_upsampler_csv(ctx.output(ctx.cfg["paths.upsampler_log"]), history)
    print(f"upsampler: {len(history)} steps, total {history[0].total:.6f} -> {history[-1].total:.6f}")
    return 0


def read_manifest(ctx: Context):
    manifest = ctx.existing("paths.manifest", "pair manifest")
    size = ctx.cfg["encoder.image_size"]
    optical, sar = [], []
    with open(manifest, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows and [c.strip() for c in rows[0]] == ["opt_path", "sar_path"]:
        rows = rows[1:]
    if not rows:
        raise InputError(f"{manifest}: no pairs listed")
    for lineno, row in enumerate(rows, 1):
        if len(row) != 2:
            raise InputError(f"{manifest} row {lineno}: expected opt_path,sar_path")
        paths = [ctx.path(c.strip()) for c in row]
        for p in paths:
            if not p.is_file():
                raise InputError(f"{manifest} row {lineno}: missing file {p}")
        o = _image_float(load_raster(paths[0]), 3, str(paths[0]))
        s = load_raster(paths[1])
        s = s.to_float()[:1] if s.channels == 3 else s.to_float()
        if o.shape[1:] != (size, size) or s.shape[1:] != (size, size):
            raise InputError(f"{manifest} row {lineno}: images must be {size}x{size}")
        optical.append(o)
        sar.append(s)
    return np.stack(optical), np.stack(sar)


def cmd_distill(ctx: Context, args) -> int:
    optical, sar = read_manifest(ctx)
    teacher = ctx.encoder()
    state, history = train_alignment(optical, sar, teacher, ctx.cfg.distill())
    state.student.save(ctx.output(ctx.cfg["paths.student"]))
    write_distill_csv(ctx.output(ctx.cfg["paths.distill_log"]), history)
    print(f"distill: {len(history)} steps, total {history[0]['total']:.6f} -> {history[-1]['total']:.6f}")
    return 0


def cmd_segment(ctx: Context, args) -> int:
    image = load_raster(ctx.existing(args.image, "input image"))
    enc_key = "paths.student" if args.sar else "paths.encoder"
    encoder = ctx.encoder(enc_key)
    upsampler = UpsamplerParams.load(ctx.existing("paths.upsampler", "upsampler weights"))
    emb = ctx.cfg["paths.vocab_embeddings"]
    vocab = load_vocabulary(ctx.existing(args.vocab, "vocabulary"), ctx.cfg["encoder.proj_dim"],
                            ctx.existing(emb, "vocabulary embeddings") if emb else None)
    steps = ctx.cfg["infer.steps"] or None
    model = Segmenter(encoder, upsampler, vocab, ctx.cfg.bias(), steps)
    resized = resize_long_side(image, ctx.cfg["infer.long_side"])
    if args.sar:
        grey = resized.to_float()[:1] if resized.channels == 3 else resized.to_float()
        x = sar_to_rgb(grey[None])[0]
    else:
        x = _image_float(resized, 3, args.image)
    result = slide_inference(x, model, ctx.cfg["infer.window"], ctx.cfg["infer.stride"])
    mask = SegmentationMask.from_array(segment_argmax(result.scores))
    save_mask(ctx.output(args.out), mask)
    if args.color:
        save_raster(ctx.output(args.color), colorize(mask))
    counts = np.bincount(mask.indices.reshape(-1), minlength=len(vocab))
    print(f"segment: {mask.width}x{mask.height}, {len(result.windows)} windows, "
          + ", ".join(f"{n}={c}" for n, c in zip(vocab.names, counts)))
    return 0


def cmd_eval(ctx: Context, args) -> int:
    pred_dir = ctx.existing(args.pred, "prediction directory")
    gt_dir = ctx.existing(args.gt, "ground-truth directory")
    preds = {p.stem: p for p in pred_dir.glob("*.pgm")}
    gts = {p.stem: p for p in gt_dir.glob("*.pgm")}
    if not preds or not gts:
        raise InputError("prediction and ground-truth directories must both contain .pgm masks")
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        raise InputError("unmatched stems: " + ", ".join(unmatched))
    ignore = ctx.cfg["infer.ignore_index"]
    pairs = [(load_mask(preds[s]), load_mask(gts[s])) for s in sorted(preds)]
    n = ctx.cfg["infer.num_classes"]
    if n <= 0:
        seen = [int(a.max()) for p, g in pairs for a in (p.indices, g.indices[g.indices != ignore])
                if a.size]
        n = max(seen) + 1 if seen else 1
    cm = sum(metrics.confusion(p, g, n, ignore) for p, g in pairs)
    mean, iou = metrics.miou(cm)
    out = ctx.output(ctx.cfg["paths.metrics"])
    metrics.write_report(out, iou, mean)
    print(f"eval: {len(pairs)} masks, {n} classes, mIoU {mean:.6f}")
    return 0


def cmd_gradcheck(ctx: Context, args) -> int:
    return gradcheck.main(ctx.cfg["seed"])


def cmd_gen_toy_data(ctx: Context, args) -> int:
    root = ctx.output(args.out)
    counts = write_toy_workspace(root, ctx.cfg["seed"])
    print(f"gen-toy-data: wrote {counts} under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="base directory for every relative path")
    common.add_argument("--config", help="key = value config file (relative to --workdir)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help="override 'seed'")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    parser = argparse.ArgumentParser(
        prog="ovseg", description="Training-free open-vocabulary segmentation toolkit.",
        epilog="config keys:\n" + schema_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-upsampler", parents=[common], help="fit the feature upsampler")
    p.add_argument("--gamma", type=float, help="override 'train.gamma'")
    p.set_defaults(func=cmd_train_upsampler)

    p = sub.add_parser("distill", parents=[common], help="align a SAR student to the frozen encoder")
    p.add_argument("--k", type=int, help="override 'distill.k'")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("segment", parents=[common], help="segment one image against a vocabulary")
    p.add_argument("image")
    p.add_argument("vocab")
    p.add_argument("--out", default="mask.pgm", help="output class-index mask (P5)")
    p.add_argument("--color", help="optional colourised mask (P6)")
    p.add_argument("--sar", action="store_true", help="use the distilled student on a SAR image")
    p.add_argument("--lambda", dest="lam", type=float, help="override 'infer.lambda'")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", parents=[common], help="mIoU of predicted masks against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-toy-data", parents=[common], help="write the synthetic toy workspace")
    p.add_argument("--out", default=".", help="target directory (relative to --workdir)")
    p.set_defaults(func=cmd_gen_toy_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        return args.func(ctx, args)
    except (InputError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OvsegError, FloatingPointError) as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
