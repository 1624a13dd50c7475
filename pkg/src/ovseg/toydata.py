"""Synthetic corpora for desk-scale experiments.

Everything here is a deterministic function of a seed. The layout written by
:func:`write_toy_workspace` is::

    corpus/img_XX.ppm            upsampler training images
    pairs/opt_XX.ppm, sar_XX.pgm optical/SAR pairs, plus pairs.csv
    eval/images/*.ppm, eval/masks/*.pgm, eval/vocab.txt
    planted/tokens.ovw, gt.pgm, vocab.txt, vocab_emb.ovw
    encoder.ovw, toy.cfg
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import weights as ovw
from .config import RunConfig
from .encoder import init_weights
from .ovhead import ClassGroup, ClassVocabulary, save_vocabulary
from .raster import Raster, SegmentationMask, save_mask, save_raster

# toy scale: 64 px inputs with 8 px patches give an 8x8 grid (>= K = 7) and 3 upsampling steps
TOY_OVERRIDES = {
    "encoder.image_size": "64",
    "encoder.patch_size": "8",
    "encoder.depth": "2",
    "encoder.embed_dim": "32",
    "encoder.num_heads": "2",
    "encoder.proj_dim": "16",
    "infer.long_side": "128",
    "infer.window": "64",
    "infer.stride": "32",
    "infer.num_classes": "2",
    "paths.corpus": "corpus",
    "paths.manifest": "pairs.csv",
}

CORPUS_SIZE = 10
CORPUS_SIDE = 96
PAIR_COUNT = 16
EVAL_COUNT = 3
EVAL_SIDE = 128


def scene(rng: np.random.Generator, side: int, shapes: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-smooth RGB scene and its two-class label map.

    Background is a soft colour gradient; rectangles are class 1 ("building"),
    discs are painted but stay class 0.
    """
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    c0, c1 = rng.uniform(40, 120, 3), rng.uniform(40, 120, 3)
    img = c0[:, None, None] * (1 - yy) + c1[:, None, None] * yy
    img = img + 20 * np.sin(2 * np.pi * (xx * rng.uniform(0.5, 2.0)))[None]
    labels = np.zeros((side, side), dtype=np.uint8)
    for i in range(shapes):
        colour = rng.uniform(0, 255, 3)
        if i % 2 == 0:
            h, w = rng.integers(side // 8, side // 3, 2)
            y, x = rng.integers(0, side - h), rng.integers(0, side - w)
            img[:, y:y + h, x:x + w] = colour[:, None, None]
            labels[y:y + h, x:x + w] = 1
        else:
            r = rng.uniform(side / 16, side / 6)
            cy, cx = rng.uniform(0, side, 2)
            disc = (np.mgrid[0:side, 0:side][0] - cy) ** 2 + (np.mgrid[0:side, 0:side][1] - cx) ** 2 < r * r
            img[:, disc] = colour[:, None]
            labels[disc] = 0
    img = img + rng.normal(0, 4, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(1, 2, 0), labels


def to_sar(rgb: np.ndarray, rng: np.random.Generator, looks: int = 4, max_shift: int = 2) -> np.ndarray:
    """Grey intensity with multiplicative gamma speckle and a small circular shift."""
    grey = rgb.astype(np.float64).mean(axis=2)
    speckle = rng.gamma(looks, 1.0 / looks, grey.shape)
    dy, dx = rng.integers(-max_shift, max_shift + 1, 2)
    sar = np.roll(grey * speckle, (int(dy), int(dx)), axis=(0, 1))
    return np.clip(np.rint(sar), 0, 255).astype(np.uint8)


def injected_cls_tokens(rng: np.random.Generator, n: int = 64, dim: int = 32,
                        beta: float = 0.5) -> np.ndarray:
    """[1 + n, dim] tokens whose patch rows carry ``beta`` times the [CLS] row."""
    cls = rng.standard_normal(dim)
    patches = rng.standard_normal((n, dim)) + beta * cls
    return np.vstack([cls, patches])


def planted_bias_problem(seed: int = 0, grid: int = 16, dim: int = 32, beta: float = 0.5,
                         cls_scale: float = 5.0, noise: float = 0.1):
    """Two-class token set that is only separable after subtracting the [CLS] share.

    Class directions u0, u1 and a global direction g are orthonormal. Text
    embeddings are t0 = u0 and t1 = 0.8 u1 + 0.6 g, so the leaked global share
    ``beta * cls_scale * g`` drags every patch toward class 1 until removed.
    Returns (tokens [1 + grid^2, dim], gt [grid, grid] uint8, vocabulary).
    """
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, 3)))
    u0, u1, g = basis.T
    gt = np.zeros((grid, grid), dtype=np.uint8)
    y, x = rng.integers(0, grid // 2, 2)
    gt[y:y + grid // 2, x:x + grid // 2] = 1
    cls = cls_scale * g
    signal = np.where(gt.reshape(-1, 1) == 1, u1, u0)
    patches = signal + noise * rng.standard_normal((grid * grid, dim)) / np.sqrt(dim) + beta * cls
    t1 = 0.8 * u1 + 0.6 * g
    vocab = ClassVocabulary([
        ClassGroup("background", ["background"], u0[None] / np.linalg.norm(u0)),
        ClassGroup("building", ["building"], t1[None] / np.linalg.norm(t1)),
    ])
    return np.vstack([cls, patches]), gt, vocab


def toy_config(seed: int = 0) -> RunConfig:
    cfg = RunConfig()
    cfg.update(TOY_OVERRIDES)
    cfg.update({"seed": str(seed), "encoder.seed": str(seed)})
    return cfg


def write_toy_workspace(root, seed: int = 0) -> dict[str, int]:
    """Write all toy datasets, frozen encoder weights and ``toy.cfg`` under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    cfg = toy_config(seed)

    (root / "corpus").mkdir(parents=True, exist_ok=True)
    for i in range(CORPUS_SIZE):
        rgb, _ = scene(rng, CORPUS_SIDE)
        save_raster(root / "corpus" / f"img_{i:02d}.ppm", Raster.from_array(rgb))

    side = cfg["encoder.image_size"]
    (root / "pairs").mkdir(exist_ok=True)
    rows = []
    for i in range(PAIR_COUNT):
        rgb, _ = scene(rng, side, shapes=3)
        opt, sar = f"pairs/opt_{i:02d}.ppm", f"pairs/sar_{i:02d}.pgm"
        save_raster(root / opt, Raster.from_array(rgb))
        save_raster(root / sar, Raster.from_array(to_sar(rgb, rng)))
        rows.append((opt, sar))
    with open(root / cfg["paths.manifest"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["opt_path", "sar_path"])
        w.writerows(rows)

    for sub in ("eval/images", "eval/masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i in range(EVAL_COUNT):
        rgb, labels = scene(rng, EVAL_SIDE)
        save_raster(root / "eval" / "images" / f"scene_{i:02d}.ppm", Raster.from_array(rgb))
        save_mask(root / "eval" / "masks" / f"scene_{i:02d}.pgm", SegmentationMask.from_array(labels))
    (root / "eval" / "vocab.txt").write_text(
        "background = background | bare ground | road\nbuilding = building | roof | house\n",
        encoding="utf-8")

    (root / "planted").mkdir(exist_ok=True)
    tokens, gt, vocab = planted_bias_problem(seed)
    ovw.save(root / "planted" / "tokens.ovw", {"tokens": tokens})
    save_mask(root / "planted" / "gt.pgm", SegmentationMask.from_array(gt))
    save_vocabulary(root / "planted" / "vocab.txt", vocab, root / "planted" / "vocab_emb.ovw")

    init_weights(cfg.encoder(), cfg["encoder.seed"]).save(root / cfg["paths.encoder"])
    (root / "toy.cfg").write_text("# desk-scale configuration written by gen-toy-data\n"
                                  + cfg.to_text(), encoding="utf-8")
    return {"corpus": CORPUS_SIZE, "pairs": PAIR_COUNT, "eval": EVAL_COUNT}
