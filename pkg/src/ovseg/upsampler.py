"""Guided feature upsampler: one shared joint-bilateral 2x operator applied n times.

The range kernel comes from a small MLP over guidance pixels (the RGB image
resized to each step's resolution); the spatial kernel is a Gaussian over
window offsets.  Their product is renormalised per output pixel and applied
to the bilinearly upsampled low-resolution features.

Training pairs the upsampler with a learnable blur-and-stride downsampler
(feature reconstruction) and a two-layer convolutional decoder that has to
recover the input image from the upsampled features.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ndtensor as nt
from . import weights as ovw
from .encoder import EncoderConfig, EncoderWeights, encode, init_weights, tokens_to_map
from .errors import ConfigError, ContractError, DimensionError, InputError
from .ndtensor import Tape, Tensor
from .optim import Adam

log = logging.getLogger(__name__)

DOWN_KERNEL = 5


def window_offsets(radius: int) -> np.ndarray:
    """[(2r+1)^2, 2] integer (dy, dx) offsets, row-major, matching ``ndtensor.window_*``."""
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1)


@dataclass
class JbuParams:
    radius: int
    log_tau_spatial: Tensor
    log_tau_range: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def tau_spatial(self) -> Tensor:
        return nt.exp(self.log_tau_spatial)

    @property
    def tau_range(self) -> Tensor:
        return nt.exp(self.log_tau_range)

    def tensors(self) -> dict[str, Tensor]:
        return {"log_tau_spatial": self.log_tau_spatial, "log_tau_range": self.log_tau_range,
                "mlp.w1": self.w1, "mlp.b1": self.b1, "mlp.w2": self.w2, "mlp.b2": self.b2}


def init_jbu(rng: np.random.Generator, guidance_dim: int = 3, hidden: int = 32,
             radius: int = 5, tau_spatial: float = 2.0, tau_range: float = 1.0) -> JbuParams:
    def t(a):
        return Tensor(a, requires_grad=True)

    return JbuParams(
        radius=radius,
        log_tau_spatial=t(np.log(tau_spatial)),
        log_tau_range=t(np.log(tau_range)),
        w1=t(rng.standard_normal((guidance_dim, hidden)) / np.sqrt(guidance_dim)),
        b1=t(np.zeros(hidden)),
        w2=t(rng.standard_normal((hidden, hidden)) / np.sqrt(hidden)),
        b2=t(np.zeros(hidden)),
    )


@dataclass
class CrnParams:
    """conv3x3(c->hidden) -> channel LayerNorm -> GELU -> conv3x3(hidden->3) -> tanh."""
    w1: Tensor
    b1: Tensor
    ln_g: Tensor
    ln_b: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "ln.g": self.ln_g, "ln.b": self.ln_b,
                "w2": self.w2, "b2": self.b2}


def init_crn(rng: np.random.Generator, channels: int, hidden: int = 32) -> CrnParams:
    def t(a):
        return Tensor(a, requires_grad=True)

    return CrnParams(
        w1=t(rng.standard_normal((hidden, channels, 3, 3)) / np.sqrt(9 * channels)),
        b1=t(np.zeros(hidden)),
        ln_g=t(np.ones(hidden)),
        ln_b=t(np.zeros(hidden)),
        w2=t(rng.standard_normal((3, hidden, 3, 3)) / np.sqrt(9 * hidden)),
        b2=t(np.zeros(3)),
    )


@dataclass
class DownsamplerParams:
    """One 5x5 blur per 2x step, stored as logits; taps are their softmax."""
    logits: Tensor  # [steps, 25]

    def taps(self, step: int) -> Tensor:
        return nt.softmax(self.logits[step], axis=-1)

    @property
    def steps(self) -> int:
        return self.logits.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"logits": self.logits}


def init_down(steps: int, sigma: float = 1.0) -> DownsamplerParams:
    off = window_offsets(DOWN_KERNEL // 2)
    gauss = -(off**2).sum(axis=1) / (2 * sigma**2)
    return DownsamplerParams(Tensor(np.tile(gauss, (steps, 1)), requires_grad=True))


@dataclass
class UpsamplerParams:
    jbu: JbuParams
    crn: CrnParams
    down: DownsamplerParams

    @property
    def steps(self) -> int:
        return self.down.steps

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {"jbu": self.jbu.tensors(), "crn": self.crn.tensors(), "down": self.down.tensors()}

    def trainable(self) -> list[Tensor]:
        return [t for g in self.groups().values() for t in g.values()]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"jbu.radius": np.array(float(self.jbu.radius))}
        for gname, group in self.groups().items():
            for k, v in group.items():
                out[f"{gname}.{k}"] = v.data
        return out

    def save(self, path) -> None:
        ovw.save(path, self.arrays())

    @classmethod
    def from_arrays(cls, a: dict[str, np.ndarray], requires_grad: bool = False) -> "UpsamplerParams":
        def t(name):
            if name not in a:
                raise InputError(f"upsampler weights lack record {name!r}")
            return Tensor(a[name], requires_grad=requires_grad)

        jbu = JbuParams(int(round(float(t("jbu.radius").item()))), t("jbu.log_tau_spatial"),
                        t("jbu.log_tau_range"), t("jbu.mlp.w1"), t("jbu.mlp.b1"),
                        t("jbu.mlp.w2"), t("jbu.mlp.b2"))
        crn = CrnParams(t("crn.w1"), t("crn.b1"), t("crn.ln.g"), t("crn.ln.b"),
                        t("crn.w2"), t("crn.b2"))
        return cls(jbu, crn, DownsamplerParams(t("down.logits")))

    @classmethod
    def load(cls, path) -> "UpsamplerParams":
        return cls.from_arrays(ovw.load(path))


def init_upsampler(channels: int, steps: int, seed: int = 0, radius: int = 5,
                   hidden: int = 32, tau_spatial: float = 2.0,
                   tau_range: float = 1.0) -> UpsamplerParams:
    rng = np.random.default_rng(seed)
    jbu = init_jbu(rng, 3, hidden, radius, tau_spatial, tau_range)
    crn = init_crn(rng, channels)
    return UpsamplerParams(jbu, crn, init_down(steps))


# ---------------------------------------------------------------- kernels


def k_spatial(offsets, tau_spatial) -> Tensor:
    """exp(-|p - q|^2 / (2 tau^2)) for each window offset."""
    d2 = Tensor((np.asarray(offsets, dtype=np.float64) ** 2).sum(axis=-1))
    tau = nt.as_tensor(tau_spatial)
    return nt.exp(-d2 / (2.0 * nt.square(tau)))


def guidance_mlp(x, params: JbuParams) -> Tensor:
    """Pointwise MLP over the last axis ([..., d_g] -> [..., hidden])."""
    h = nt.gelu(nt.as_tensor(x) @ params.w1 + params.b1)
    return h @ params.w2 + params.b2


def k_range(guidance_window, center, params: JbuParams) -> Tensor:
    """Softmax over the window of MLP(centre) . MLP(neighbour) / tau_range^2.

    ``guidance_window`` is [window^2, d_g] and ``center`` is [d_g].
    """
    guidance_window = nt.as_tensor(guidance_window)
    side = 2 * params.radius + 1
    if guidance_window.shape[0] != side * side:
        raise DimensionError(f"window has {guidance_window.shape[0]} entries, expected {side * side}")
    feats = guidance_mlp(guidance_window, params)
    c = guidance_mlp(nt.as_tensor(center).reshape(1, -1), params)
    logits = (feats @ c.transpose(1, 0)).reshape(-1) * nt.exp(-2.0 * params.log_tau_range)
    return nt.softmax(logits, axis=0)


def range_kernel(guidance, params: JbuParams) -> Tensor:
    """Vectorised ``k_range`` for every pixel of [d_g, H, W] guidance -> [window^2, H, W]."""
    guidance = nt.as_tensor(guidance)
    dg, h, w = guidance.shape
    feats = guidance_mlp(guidance.reshape(dg, h * w).transpose(1, 0), params)
    feats = feats.transpose(1, 0).reshape(-1, h, w)
    padded = nt.pad2d(feats, params.radius, "reflect")
    logits = nt.window_dot(padded, feats, params.radius) * nt.exp(-2.0 * params.log_tau_range)
    return nt.softmax(logits, axis=0)


def jbu_weights(guidance, params: JbuParams) -> Tensor:
    """Combined kernel: range * spatial, renormalised to sum 1 per output pixel."""
    kr = range_kernel(guidance, params)
    ks = k_spatial(window_offsets(params.radius), params.tau_spatial)
    combined = kr * ks.reshape(-1, 1, 1)
    return combined / combined.sum(axis=0, keepdims=True)


def jbu_once(lowres, guidance, params: JbuParams) -> Tensor:
    """2x joint bilateral upsampling of [c, h, w] features under [d_g, 2h, 2w] guidance."""
    lowres, guidance = nt.as_tensor(lowres), nt.as_tensor(guidance)
    _, h, w = lowres.shape
    if guidance.ndim != 3 or guidance.shape[1:] != (2 * h, 2 * w):
        raise DimensionError(f"guidance {guidance.shape} is not twice the size of {lowres.shape}")
    up = nt.resize_bilinear(lowres, 2 * h, 2 * w)
    padded = nt.pad2d(up, params.radius, "reflect")
    return nt.window_sum(padded, jbu_weights(guidance, params), params.radius)


def simfeatup_upsample(lowres, image, params: JbuParams, steps: int) -> Tensor:
    """Apply the shared ``jbu_once`` ``steps`` times, guided by the resized image."""
    lowres, image = nt.as_tensor(lowres), nt.as_tensor(image)
    _, h, w = lowres.shape
    if (2**steps) * h > image.shape[-2] or (2**steps) * w > image.shape[-1]:
        raise DimensionError(f"{steps} doublings of {h}x{w} exceed image {image.shape[-2:]}")
    x = lowres
    for s in range(1, steps + 1):
        th, tw = h * 2**s, w * 2**s
        guide = Tensor(nt.resize_bilinear(image, th, tw).data)
        x = jbu_once(x, guide, params)
    return x


# ---------------------------------------------------------------- decoder / downsampler


def crn_forward(feats, crn: CrnParams) -> Tensor:
    h = nt.conv2d(nt.as_tensor(feats), crn.w1, crn.b1, padding=1)
    h = nt.layer_norm(h.transpose(1, 2, 0), crn.ln_g, crn.ln_b).transpose(2, 0, 1)
    return nt.tanh(nt.conv2d(nt.gelu(h), crn.w2, crn.b2, padding=1))


def downsample(hires, down: DownsamplerParams, steps: int | None = None) -> Tensor:
    """Blur-and-stride-2, ``steps`` times; kernel i is used for the i-th halving."""
    x = nt.as_tensor(hires)
    steps = down.steps if steps is None else steps
    if steps > down.steps:
        raise DimensionError(f"downsampler has {down.steps} kernels, {steps} requested")
    pad = DOWN_KERNEL // 2
    for s in range(steps):
        c, h, w = x.shape
        cols = nt.im2col(nt.pad2d(x, pad, "reflect"), DOWN_KERNEL, DOWN_KERNEL, 2)
        ho, wo = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        x = (down.taps(s).reshape(1, -1) @ cols).reshape(c, ho, wo)
    return x


def _halvings(hi: int, lo: int) -> int:
    n = 0
    while hi > lo:
        hi = (hi - 1) // 2 + 1
        n += 1
    if hi != lo:
        raise DimensionError(f"cannot halve {hi} down to {lo}")
    return n


# ---------------------------------------------------------------- losses


def loss_rec(lowres, hires, down: DownsamplerParams) -> Tensor:
    lowres, hires = nt.as_tensor(lowres), nt.as_tensor(hires)
    recon = downsample(hires, down, _halvings(hires.shape[-1], lowres.shape[-1]))
    if recon.shape != lowres.shape:
        raise DimensionError(f"reconstruction {recon.shape} vs low-res {lowres.shape}")
    return nt.mean(nt.square(lowres - recon))


def loss_img(image, hires, crn: CrnParams) -> Tensor:
    image = nt.as_tensor(image)
    if image.data.min() < -1.0 or image.data.max() > 1.0:
        raise ContractError("image must be normalised to [-1, 1]")
    out = crn_forward(hires, crn)
    if out.shape != image.shape:
        raise DimensionError(f"decoder output {out.shape} vs image {image.shape}")
    return nt.mean(nt.square(image - out))


def total_loss(image, lowres, params: UpsamplerParams, gamma: float = 0.1,
               steps: int | None = None):
    """Returns (total, feature reconstruction, image reconstruction)."""
    if gamma < 0:
        raise ContractError("gamma must be >= 0")
    steps = params.steps if steps is None else steps
    hires = simfeatup_upsample(lowres, image, params.jbu, steps)
    rec = loss_rec(lowres, hires, params.down)
    img = loss_img(image, hires, params.crn)
    return rec + gamma * img, rec, img


# ---------------------------------------------------------------- multi-view jitter

MAX_SHIFT = 8
ZOOM_RANGE = (0.9, 1.1)


def _zoom_matrix(n: int, zoom: float) -> np.ndarray:
    m = np.zeros((n, n))
    src = (np.arange(n) + 0.5 - n / 2) / zoom + n / 2 - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    rows = np.arange(n)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


@dataclass(frozen=True)
class View:
    """Zoom about the centre, then optional horizontal flip, then circular shift."""
    flip: bool = False
    dy: int = 0
    dx: int = 0
    zoom: float = 1.0

    def validate(self) -> None:
        if abs(self.dy) > MAX_SHIFT or abs(self.dx) > MAX_SHIFT:
            raise ConfigError(f"translation ({self.dy}, {self.dx}) exceeds {MAX_SHIFT} px")
        if not ZOOM_RANGE[0] <= self.zoom <= ZOOM_RANGE[1]:
            raise ConfigError(f"zoom {self.zoom} outside {ZOOM_RANGE}")

    @property
    def is_identity(self) -> bool:
        return self == View()

    def apply(self, x) -> Tensor:
        x = nt.as_tensor(x)
        h, w = x.shape[-2:]
        if self.zoom != 1.0:
            x = (Tensor(_zoom_matrix(h, self.zoom)) @ x) @ Tensor(_zoom_matrix(w, self.zoom).T)
        if self.flip:
            x = nt.take(x, np.arange(w)[::-1], -1)
        if self.dy:
            x = nt.take(x, (np.arange(h) - self.dy) % h, -2)
        if self.dx:
            x = nt.take(x, (np.arange(w) - self.dx) % w, -1)
        return x


def random_views(rng: np.random.Generator, count: int) -> list[View]:
    """Identity first, then random flip / shift / zoom views."""
    views = [View()]
    for _ in range(count - 1):
        views.append(View(flip=bool(rng.integers(2)),
                          dy=int(rng.integers(-MAX_SHIFT, MAX_SHIFT + 1)),
                          dx=int(rng.integers(-MAX_SHIFT, MAX_SHIFT + 1)),
                          zoom=float(rng.uniform(*ZOOM_RANGE))))
    return views


FeatureFn = Callable[[Tensor], Tensor]


def multiview_consistency_loss(image, feature_fn: FeatureFn, params: UpsamplerParams,
                               views: Sequence[View], steps: int | None = None,
                               hires=None):
    """Mean over views of |F(v(I)) - down(v(up(F(I))))|^2.

    ``feature_fn`` maps a [3, H, W] image to frozen [c, h, w] features.  Returns
    (loss, hires) so callers can reuse the upsampled features.
    """
    if not views:
        raise ConfigError("at least one view is required")
    for v in views:
        v.validate()
    image = nt.as_tensor(image)
    steps = params.steps if steps is None else steps
    if hires is None:
        lowres = feature_fn(image)
        hires = simfeatup_upsample(lowres, image, params.jbu, steps)
    total = None
    for v in views:
        target = feature_fn(Tensor(v.apply(image).data))
        term = loss_rec(target, v.apply(hires), params.down)
        total = term if total is None else total + term
    return total * (1.0 / len(views)), hires


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    gamma: float = 0.1
    batch: int = 1
    views: int = 2
    crop: int = 0  # 0 -> encoder image size
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class LossRecord:
    step: int
    loss_rec: float
    loss_img: float
    total: float


def encoder_features(weights: EncoderWeights, config: EncoderConfig) -> FeatureFn:
    def fn(image: Tensor) -> Tensor:
        out = encode(Tensor(nt.as_tensor(image).data), weights, config)
        return Tensor(tokens_to_map(out.O_prime, out.X_last.h, out.X_last.w).data)
    return fn


def upsample_steps_for(config: EncoderConfig) -> int:
    n = int(round(np.log2(config.patch_size)))
    if 2**n != config.patch_size:
        raise ConfigError("patch_size must be a power of two for repeated 2x upsampling")
    return n


def train_simfeatup(corpus: Sequence[np.ndarray], encoder_weights: EncoderWeights,
                    enc_config: EncoderConfig, cfg: TrainConfig,
                    params: UpsamplerParams | None = None,
                    jbu_kwargs: dict | None = None):
    """Fit the upsampler, downsampler and decoder on random crops of ``corpus``.

    ``corpus`` holds [3, H, W] float arrays in [-1, 1].  Returns the trained
    parameters and one :class:`LossRecord` per step.
    """
    if not corpus:
        raise InputError("training corpus is empty")
    crop = cfg.crop or enc_config.image_size
    if crop != enc_config.image_size:
        raise ConfigError("crop size must equal encoder image size")
    for img in corpus:
        if img.shape[0] != 3 or min(img.shape[1:]) < crop:
            raise InputError(f"corpus image {img.shape} smaller than crop {crop}")
    steps = upsample_steps_for(enc_config)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_upsampler(enc_config.proj_dim, steps, seed=cfg.seed, **(jbu_kwargs or {}))
    before = encoder_weights.fingerprint()
    feature_fn = encoder_features(encoder_weights, enc_config)
    opt = Adam(params.trainable(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    history: list[LossRecord] = []
    for step in range(1, cfg.steps + 1):
        opt.zero_grad()
        rec_sum = img_sum = 0.0
        for _ in range(cfg.batch):
            img = corpus[int(rng.integers(len(corpus)))]
            y0 = int(rng.integers(img.shape[1] - crop + 1))
            x0 = int(rng.integers(img.shape[2] - crop + 1))
            image = Tensor(img[:, y0:y0 + crop, x0:x0 + crop])
            views = random_views(rng, cfg.views)
            with Tape() as tape:
                rec, hires = multiview_consistency_loss(image, feature_fn, params, views, steps)
                limg = loss_img(image, hires, params.crn)
                loss = (rec + cfg.gamma * limg) * (1.0 / cfg.batch)
            tape.backward(loss)
            rec_sum += rec.item()
            img_sum += limg.item()
        opt.step()
        rec_m, img_m = rec_sum / cfg.batch, img_sum / cfg.batch
        history.append(LossRecord(step, rec_m, img_m, rec_m + cfg.gamma * img_m))
        if step % 20 == 0 or step == 1:
            log.info("step %d rec %.5f img %.5f", step, rec_m, img_m)
    if encoder_weights.fingerprint() != before:
        raise ContractError("encoder weights changed during upsampler training")
    return params, history


def write_loss_csv(path, history: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_rec", "loss_img", "total"])
        for r in history:
            w.writerow([r.step, repr(r.loss_rec), repr(r.loss_img), repr(r.total)])


MICRO_ENCODER = EncoderConfig(image_size=32, patch_size=16, depth=2, embed_dim=16,
                              num_heads=2, proj_dim=8)


def micro_upsampler_problem(seed: int = 0, gamma: float = 0.1):
    """Objective closure and parameter groups on a single seeded 32x32 image."""
    rng = np.random.default_rng(seed)
    cfg = MICRO_ENCODER
    enc = init_weights(cfg, seed)
    image = Tensor(rng.uniform(-1, 1, (3, cfg.image_size, cfg.image_size)))
    lowres = encoder_features(enc, cfg)(image)
    params = init_upsampler(cfg.proj_dim, upsample_steps_for(cfg), seed=seed)

    def loss_fn():
        return total_loss(image, lowres, params, gamma)[0]

    return loss_fn, params.groups()
