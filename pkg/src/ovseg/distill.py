"""Optical-to-SAR encoder distillation.

A frozen optical teacher and a trainable SAR student share one architecture.
Three objectives pull the student toward the teacher: a symmetric InfoNCE on
the [CLS] outputs, a cosine distance on the [CLS] outputs, and a cosine
distance between K x K region means of the patch outputs.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import ndtensor as nt
from .encoder import EncoderConfig, EncoderWeights, encode, init_weights
from .errors import ConfigError, ContractError, DimensionError, InputError
from .ndtensor import Tape, Tensor
from .optim import Adam

log = logging.getLogger(__name__)

TAU_MIN, TAU_MAX = 1e-3, 1.0


@dataclass
class DistillConfig:
    tau: float = 0.07
    k: int = 7
    w_contrast: float = 1.0
    w_cls: float = 1.0
    w_local: float = 1.0
    steps: int = 100
    lr: float = 1e-3
    batch: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.k < 1:
            raise ConfigError("region count K must be >= 1")


@dataclass
class DistillBatch:
    optical: np.ndarray  # [N, 3, H, W] in [-1, 1]
    sar: np.ndarray  # [N, 1, H, W] or [N, 3, H, W] in [-1, 1]
    pair_ids: list[int]

    def __post_init__(self):
        n = len(self.pair_ids)
        if n < 1:
            raise InputError("a batch needs at least one pair")
        if len(set(self.pair_ids)) != n:
            raise InputError("pair ids must be unique within a batch")
        if self.optical.shape[0] != n or self.sar.shape[0] != n:
            raise InputError("pair count does not match image count")
        if self.optical.shape[-2:] != self.sar.shape[-2:]:
            raise InputError("optical and SAR images differ in size")


def sar_to_rgb(sar: np.ndarray) -> np.ndarray:
    """Replicate single-channel rasters to three channels."""
    if sar.shape[-3] == 3:
        return sar
    if sar.shape[-3] != 1:
        raise DimensionError(f"SAR input must have 1 or 3 channels, got {sar.shape[-3]}")
    return np.repeat(sar, 3, axis=-3)


def _check_rows(x: np.ndarray, what: str):
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms == 0):
        raise ContractError(f"zero-norm {what} at index {int(np.flatnonzero(norms.reshape(-1) == 0)[0])}")


def cosine(a, b) -> Tensor:
    """Cosine similarity along the last axis."""
    a, b = nt.as_tensor(a), nt.as_tensor(b)
    _check_rows(a.data, "vector")
    _check_rows(b.data, "vector")
    # one square root of the product keeps cos(v, v) == 1 and cos(v, -v) == -1 exact
    sq_a = nt.tsum(nt.square(a), -1)
    sq_b = nt.tsum(nt.square(b), -1)
    return nt.tsum(a * b, -1) / nt.sqrt(sq_a * sq_b)


def loss_cls_contrast(opt_cls, sar_cls, tau) -> Tensor:
    """Symmetric cross-entropy over the N x N cosine / tau matrix."""
    opt_cls, sar_cls = nt.as_tensor(opt_cls), nt.as_tensor(sar_cls)
    if opt_cls.ndim != 2 or opt_cls.shape != sar_cls.shape:
        raise DimensionError(f"expected matching [N, c] inputs, got {opt_cls.shape}, {sar_cls.shape}")
    _check_rows(opt_cls.data, "optical [CLS] row")
    _check_rows(sar_cls.data, "SAR [CLS] row")
    n = opt_cls.shape[0]
    sim = nt.l2_normalize(opt_cls) @ nt.l2_normalize(sar_cls).transpose(1, 0)
    logits = sim / nt.as_tensor(tau)
    eye = Tensor(np.eye(n))
    diag_rows = (nt.log_softmax(logits, axis=1) * eye).sum()
    diag_cols = (nt.log_softmax(logits, axis=0) * eye).sum()
    return -(diag_rows + diag_cols) * (1.0 / n)


def loss_cls_distill(opt_cls, sar_cls) -> Tensor:
    """1 - cos; batched inputs give one value per row."""
    return 1.0 - cosine(opt_cls, sar_cls)


def region_bounds(n: int, k: int) -> list[tuple[int, int]]:
    """Split ``n`` cells into ``k`` tiles of n // k; the last tile takes the remainder."""
    if n < k:
        raise DimensionError(f"grid side {n} smaller than region count {k}")
    size = n // k
    return [(i * size, (i + 1) * size if i < k - 1 else n) for i in range(k)]


def region_pool_matrix(h: int, w: int, k: int) -> np.ndarray:
    """[K*K, h*w] averaging matrix over row-major tiles."""
    m = np.zeros((k * k, h * w))
    rows, cols = region_bounds(h, k), region_bounds(w, k)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            cells = [y * w + x for y in range(r0, r1) for x in range(c0, c1)]
            m[i * k + j, cells] = 1.0 / len(cells)
    return m


def region_mean_pool(local_feats, h: int, w: int, k: int) -> Tensor:
    """[.., h*w, c] patch tokens -> [.., K*K, c] region means."""
    local_feats = nt.as_tensor(local_feats)
    if local_feats.shape[-2] != h * w:
        raise DimensionError(f"{local_feats.shape[-2]} tokens for a {h}x{w} grid")
    return Tensor(region_pool_matrix(h, w, k)) @ local_feats


def loss_local_distill(opt_local, sar_local, h: int, w: int, k: int) -> Tensor:
    """Mean over the K*K regions of 1 - cos(region mean optical, region mean SAR)."""
    po = region_mean_pool(opt_local, h, w, k)
    ps = region_mean_pool(sar_local, h, w, k)
    if po.shape != ps.shape:
        raise DimensionError("optical and SAR feature maps differ in shape")
    return (1.0 - cosine(po, ps)).mean(axis=-1)


@dataclass
class DistillLosses:
    contrast: Tensor
    cls: Tensor
    local: Tensor
    total: Tensor


def distill_losses(opt_tokens, sar_tokens, h: int, w: int, log_tau, cfg: DistillConfig) -> DistillLosses:
    """Combined objective from [N, T, c] teacher and student token outputs."""
    opt_tokens, sar_tokens = nt.as_tensor(opt_tokens), nt.as_tensor(sar_tokens)
    opt_cls, sar_cls = opt_tokens[:, 0, :], sar_tokens[:, 0, :]
    contrast = loss_cls_contrast(opt_cls, sar_cls, nt.exp(log_tau))
    cls = loss_cls_distill(opt_cls, sar_cls).mean()
    local = loss_local_distill(opt_tokens[:, 1:, :], sar_tokens[:, 1:, :], h, w, cfg.k).mean()
    total = cfg.w_contrast * contrast + cfg.w_cls * cls + cfg.w_local * local
    return DistillLosses(contrast, cls, local, total)


def _training_config(cfg: EncoderConfig) -> EncoderConfig:
    # standard final block while distilling; surgery is an inference-time change
    return replace(cfg, surgery_enabled=False)


def teacher_tokens(teacher: EncoderWeights, optical: np.ndarray) -> Tensor:
    out = encode(Tensor(optical), teacher, _training_config(teacher.config))
    return Tensor(out.O.tokens.data)


class DistillState:
    """Student weights, learnable log-temperature and the optimiser."""

    def __init__(self, teacher: EncoderWeights, cfg: DistillConfig,
                 student: EncoderWeights | None = None):
        self.cfg = cfg
        self.student = student if student is not None else teacher.copy(requires_grad=True)
        if self.student.config != teacher.config:
            raise ConfigError("teacher and student configurations differ")
        for p in self.student.trainable():
            p.requires_grad = True
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        self.log_tau = Tensor(np.log(cfg.tau), requires_grad=True)
        self.opt = Adam(self.student.trainable() + [self.log_tau], lr=cfg.lr)

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))


def distill_step(batch: DistillBatch, teacher: EncoderWeights, state: DistillState,
                 opt_tokens: Tensor | None = None) -> dict[str, float]:
    """One optimiser step on the student (and temperature). Teacher is never written."""
    if teacher.config != state.student.config:
        raise ConfigError("teacher and student configurations differ")
    cfg = state.cfg
    if opt_tokens is None:
        opt_tokens = teacher_tokens(teacher, batch.optical)
    state.opt.zero_grad()
    grid = teacher.config.grid
    with Tape() as tape:
        sar = encode(Tensor(sar_to_rgb(batch.sar)), state.student, _training_config(state.student.config))
        losses = distill_losses(opt_tokens, sar.O.tokens, grid, grid, state.log_tau, cfg)
    tape.backward(losses.total)
    tau_used = state.tau
    state.opt.step()
    state.log_tau.data[...] = np.clip(state.log_tau.data, np.log(TAU_MIN), np.log(TAU_MAX))
    return {"contrast": losses.contrast.item(), "cls": losses.cls.item(),
            "local": losses.local.item(), "total": losses.total.item(), "tau": tau_used}


def train_alignment(optical: np.ndarray, sar: np.ndarray, teacher: EncoderWeights,
                    cfg: DistillConfig):
    """Run ``cfg.steps`` distillation steps over a paired set. Returns (state, history)."""
    n = optical.shape[0]
    if n == 0:
        raise InputError("paired corpus is empty")
    grid = teacher.config.grid
    if grid < cfg.k:
        raise DimensionError(f"patch grid {grid} smaller than region count {cfg.k}")
    state = DistillState(teacher, cfg)
    before = teacher.fingerprint()
    rng = np.random.default_rng(cfg.seed)
    cached = teacher_tokens(teacher, optical).data
    history = []
    bsz = min(cfg.batch, n)
    for step in range(1, cfg.steps + 1):
        idx = np.arange(n) if bsz == n else np.sort(rng.choice(n, bsz, replace=False))
        batch = DistillBatch(optical[idx], sar[idx], [int(i) for i in idx])
        rec = distill_step(batch, teacher, state, Tensor(cached[idx]))
        rec["step"] = step
        history.append(rec)
        if step % 20 == 0 or step == 1:
            log.info("step %d total %.5f tau %.4f", step, rec["total"], rec["tau"])
    if teacher.fingerprint() != before:
        raise ContractError("teacher weights changed during distillation")
    return state, history


def write_loss_csv(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["contrast", "cls", "local", "total", "tau"]
        w.writerow(["step"] + cols)
        for r in history:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in cols])


def micro_distill_problem(seed: int = 0):
    """Combined distillation objective on the 32x32 micro configuration.

    The student starts from a perturbed copy of the teacher so that every
    term has a non-trivial gradient.
    """
    from .upsampler import MICRO_ENCODER

    rng = np.random.default_rng(seed + 1)
    teacher = init_weights(MICRO_ENCODER, seed)
    student = teacher.copy(requires_grad=True)
    for p in student.trainable():
        p.data += 0.05 * rng.standard_normal(p.shape)
    n, s = 3, MICRO_ENCODER.image_size
    optical = rng.uniform(-1, 1, (n, 3, s, s))
    sar = rng.uniform(-1, 1, (n, 1, s, s))
    cfg = DistillConfig(k=2)
    opt_tokens = teacher_tokens(teacher, optical)
    log_tau = Tensor(np.log(cfg.tau), requires_grad=True)
    grid = MICRO_ENCODER.grid
    train_cfg = _training_config(MICRO_ENCODER)

    def loss_fn():
        out = encode(Tensor(sar_to_rgb(sar)), student, train_cfg)
        return distill_losses(opt_tokens, out.O.tokens, grid, grid, log_tau, cfg).total

    return loss_fn, {"student": student.params, "tau": {"log_tau": log_tau}}
