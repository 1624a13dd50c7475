"""Resize and sliding-window inference, stitching per-window class scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .encoder import EncoderConfig, EncoderWeights, encode, map_to_tokens, tokens_to_map
from .errors import ConfigError
from .ndtensor import Tensor
from .ovhead import BiasConfig, ClassVocabulary, group_reduce, similarity_logits
from .raster import Raster
from .upsampler import UpsamplerParams, simfeatup_upsample, upsample_steps_for


def resize_long_side(img: Raster, target: int) -> Raster:
    """Bilinear resize so that max(width, height) == target (aspect kept, rounded)."""
    if target <= 0:
        raise ConfigError("target size must be positive")
    long_side = max(img.width, img.height)
    if long_side == target:
        return img
    nw = max(1, int(round(img.width * target / long_side)))
    nh = max(1, int(round(img.height * target / long_side)))
    data = img.data.astype(np.float64).transpose(2, 0, 1)
    out = nt.interp_matrix(img.height, nh) @ data @ nt.interp_matrix(img.width, nw).T
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return Raster(nw, nh, img.channels, out)


def window_positions(length: int, window: int, stride: int) -> list[int]:
    """Starts 0, stride, 2*stride, ..., with the last window aligned to the edge."""
    if length <= window:
        return [0]
    count = (length - window + stride - 1) // stride + 1
    return sorted({min(i * stride, length - window) for i in range(count)})


@dataclass
class Segmenter:
    encoder: EncoderWeights
    upsampler: UpsamplerParams
    vocab: ClassVocabulary
    bias: BiasConfig = BiasConfig()
    steps: int | None = None

    def __post_init__(self):
        cfg = self.encoder.config
        if self.vocab.dim != cfg.proj_dim:
            raise ConfigError(f"vocabulary dim {self.vocab.dim} != encoder projection dim {cfg.proj_dim}")
        if self.upsampler.crn.w1.shape[1] != cfg.proj_dim:
            raise ConfigError("upsampler was trained for a different feature dimension")
        if self.steps is None:
            self.steps = upsample_steps_for(cfg)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def window_scores(self, img: np.ndarray) -> np.ndarray:
        """[3, s, s] window -> [s, s, n_groups] class scores."""
        _, wh, ww = img.shape
        size = self.config.image_size
        x = Tensor(img)
        if (wh, ww) != (size, size):
            x = nt.resize_bilinear(x, size, size)
        out = encode(x, self.encoder, self.config)
        fmap = tokens_to_map(out.O.patches, out.O.h, out.O.w)
        hires = simfeatup_upsample(fmap, x, self.upsampler.jbu, self.steps)
        hh, hw = hires.shape[1:]
        # weights sum to one, so subtracting after upsampling equals subtracting before
        patches = map_to_tokens(hires).data - self.bias.lam * out.O.cls.data[None, :]
        scores = group_reduce(similarity_logits(patches, self.vocab), self.vocab)
        scores = scores.reshape(hh, hw, -1)
        if (hh, hw) != (wh, ww):
            scores = nt.resize_bilinear(scores.transpose(2, 0, 1), wh, ww).data.transpose(1, 2, 0)
        return scores


def _reflect_pad_br(img: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Reflect-pad [C, H, W] at the bottom and right up to (ph, pw)."""
    _, h, w = img.shape
    rows = nt.reflect_index(h, ph)[ph:ph + ph]
    cols = nt.reflect_index(w, pw)[pw:pw + pw]
    return img[:, rows][:, :, cols]


@dataclass
class SlideResult:
    scores: np.ndarray  # [H, W, n_groups], averaged over covering windows
    coverage: np.ndarray  # [H, W] window count per pixel
    windows: list[tuple[int, int]]


def slide_inference(img: np.ndarray, model: Segmenter, window: int = 224,
                    stride: int = 112) -> SlideResult:
    """Run ``model.window_scores`` over overlapping windows of a [3, H, W] image."""
    if stride <= 0 or window <= 0:
        raise ConfigError("window and stride must be positive")
    _, h, w = img.shape
    ph, pw = max(h, window), max(w, window)
    padded = _reflect_pad_br(img, ph, pw)
    ys, xs = window_positions(ph, window, stride), window_positions(pw, window, stride)
    acc = None
    cov = np.zeros((ph, pw), dtype=np.int64)
    windows = []
    for y in ys:
        for x in xs:
            s = model.window_scores(padded[:, y:y + window, x:x + window])
            if acc is None:
                acc = np.zeros((ph, pw, s.shape[-1]))
            acc[y:y + window, x:x + window] += s
            cov[y:y + window, x:x + window] += 1
            windows.append((y, x))
    scores = acc / cov[..., None]
    return SlideResult(scores[:h, :w], cov[:h, :w], windows)
