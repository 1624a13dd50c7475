"""ViT-style image encoder with an optional self-self attention final block.

Images are [3, H, W] (or batched [N, 3, H, W]) float tensors in [-1, 1].
Token matrices keep the [CLS] token in row 0 followed by patch tokens in
row-major patch order.

Parameter names (also the OVW1 record names)::

    patch.w [3*p*p, d]   patch.b [d]   cls [d]   pos [h*w+1, d]   proj [d, c]
    block{i}.ln1.g/b  block{i}.attn.wq/wk/wv/wo   (attention projections carry no bias)
    block{i}.ln2.g/b  block{i}.mlp.w1/b1/w2/b2
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nt
from . import weights as ovw
from .errors import ConfigError, DimensionError
from .ndtensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 16
    depth: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    proj_dim: int = 32
    surgery_enabled: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.proj_dim > self.embed_dim:
            raise ConfigError("proj_dim must not exceed embed_dim")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class TokenSequence:
    tokens: Tensor  # [(h*w+1), dim] or [N, (h*w+1), dim]
    h: int
    w: int

    @property
    def cls(self) -> Tensor:
        return self.tokens[..., 0, :]

    @property
    def patches(self) -> Tensor:
        return self.tokens[..., 1:, :]


@dataclass
class EncoderOutput:
    X_last: TokenSequence
    O: TokenSequence
    O_prime: Tensor


def _param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, p, c = cfg.embed_dim, cfg.patch_size, cfg.proj_dim
    shapes = {
        "patch.w": (3 * p * p, d),
        "patch.b": (d,),
        "cls": (d,),
        "pos": (cfg.grid**2 + 1, d),
    }
    for i in range(cfg.depth):
        b = f"block{i}"
        shapes.update({
            f"{b}.ln1.g": (d,), f"{b}.ln1.b": (d,),
            f"{b}.attn.wq": (d, d), f"{b}.attn.wk": (d, d),
            f"{b}.attn.wv": (d, d), f"{b}.attn.wo": (d, d),
            f"{b}.ln2.g": (d,), f"{b}.ln2.b": (d,),
            f"{b}.mlp.w1": (d, 4 * d), f"{b}.mlp.b1": (4 * d,),
            f"{b}.mlp.w2": (4 * d, d), f"{b}.mlp.b2": (d,),
        })
    shapes["proj"] = (d, c)
    return shapes


@dataclass
class EncoderWeights:
    config: EncoderConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        expected = _param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"encoder weights do not match config (missing={missing[:3]}, "
                              f"unexpected={extra[:3]})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def block(self, i: int) -> dict[str, Tensor]:
        prefix = f"block{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self, requires_grad: bool = False) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: Tensor(v.data, requires_grad=requires_grad)
                                            for k, v in self.params.items()})

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data for k, v in self.params.items()}

    def fingerprint(self) -> bytes:
        return b"".join(k.encode() + v.data.tobytes() for k, v in sorted(self.params.items()))

    @classmethod
    def from_arrays(cls, config: EncoderConfig, arrays: dict[str, np.ndarray],
                    prefix: str = "", requires_grad: bool = False) -> "EncoderWeights":
        params = {k[len(prefix):]: Tensor(v, requires_grad=requires_grad)
                  for k, v in arrays.items() if k.startswith(prefix)}
        return cls(config, params)

    def save(self, path, prefix: str = "") -> None:
        ovw.save(path, self.arrays(prefix))

    @classmethod
    def load(cls, path, config: EncoderConfig, prefix: str = "") -> "EncoderWeights":
        return cls.from_arrays(config, ovw.load(path), prefix)


def init_weights(config: EncoderConfig, seed: int = 0) -> EncoderWeights:
    """Synthetic frozen weights: Gaussian, scaled by 1/sqrt(fan_in); LN gains 1, biases 0."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif name.endswith(".b") and ".ln" in name:
            arr = np.zeros(shape)
        elif len(shape) == 2:
            arr = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            arr = rng.standard_normal(shape) / np.sqrt(config.embed_dim)
        params[name] = Tensor(arr)
    return EncoderWeights(config, params)


# ---------------------------------------------------------------- forward pieces


def patch_embed(image, weights: EncoderWeights, config: EncoderConfig) -> TokenSequence:
    image = nt.as_tensor(image)
    single = image.ndim == 3
    if single:
        image = image.reshape(1, *image.shape)
    n, ch, hh, ww = image.shape
    s, p = config.image_size, config.patch_size
    if ch != 3 or hh != s or ww != s:
        raise DimensionError(f"expected [3, {s}, {s}] image, got {tuple(image.shape[1:])}")
    g = s // p
    patches = image.reshape(n, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    patches = patches.reshape(n, g * g, 3 * p * p)
    emb = patches @ weights["patch.w"] + weights["patch.b"]
    cls = weights["cls"].reshape(1, 1, config.embed_dim) + Tensor(np.zeros((n, 1, 1)))
    tokens = nt.concat([cls, emb], axis=1) + weights["pos"]
    if single:
        tokens = tokens.reshape(tokens.shape[1:])
    return TokenSequence(tokens, g, g)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, heads, d // heads).transpose(
        *range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, t, hd = x.shape
    n = len(lead)
    return x.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, t, heads * hd)


def _qkv(x: Tensor, bw: dict[str, Tensor], heads: int):
    a = nt.layer_norm(x, bw["ln1.g"], bw["ln1.b"])
    q = a @ bw["attn.wq"]
    k = a @ bw["attn.wk"]
    v = a @ bw["attn.wv"]
    return _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)


def _swap(x: Tensor) -> Tensor:
    n = x.ndim
    return x.transpose(*range(n - 2), n - 1, n - 2)


def attention_weights(X: TokenSequence, block_weights: dict[str, Tensor], heads: int,
                      surgery: bool) -> Tensor:
    """Per-head attention matrices [.., heads, T, T] of the standard or modified block."""
    q, k, v = _qkv(X.tokens, block_weights, heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    if surgery:
        logits = (q @ _swap(q) + k @ _swap(k) + v @ _swap(v)) * scale
    else:
        logits = (q @ _swap(k)) * scale
    return nt.softmax(logits, axis=-1)


def standard_block(X: TokenSequence, block_weights: dict[str, Tensor], heads: int) -> TokenSequence:
    bw = block_weights
    q, k, v = _qkv(X.tokens, bw, heads)
    attn = nt.softmax((q @ _swap(k)) * (1.0 / np.sqrt(q.shape[-1])), axis=-1)
    y = X.tokens + (_merge_heads(attn @ v) @ bw["attn.wo"])
    hidden = nt.gelu(nt.layer_norm(y, bw["ln2.g"], bw["ln2.b"]) @ bw["mlp.w1"] + bw["mlp.b1"])
    z = y + (hidden @ bw["mlp.w2"] + bw["mlp.b2"])
    return TokenSequence(z, X.h, X.w)


def surgery_block(X: TokenSequence, block_weights: dict[str, Tensor], heads: int) -> TokenSequence:
    """Final block without FFN and residual; attention from q-q + k-k + v-v."""
    bw = block_weights
    q, k, v = _qkv(X.tokens, bw, heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    attn = nt.softmax((q @ _swap(q) + k @ _swap(k) + v @ _swap(v)) * scale, axis=-1)
    out = _merge_heads(attn @ v) @ bw["attn.wo"]
    return TokenSequence(out, X.h, X.w)


def encode(image, weights: EncoderWeights, config: EncoderConfig | None = None) -> EncoderOutput:
    config = config or weights.config
    if config.embed_dim != weights.config.embed_dim or config.depth != weights.config.depth \
            or config.proj_dim != weights.config.proj_dim \
            or config.patch_size != weights.config.patch_size \
            or config.image_size != weights.config.image_size:
        raise ConfigError("encoder weights were built for a different configuration")
    x = patch_embed(image, weights, config)
    for i in range(config.depth - 1):
        x = standard_block(x, weights.block(i), config.num_heads)
    last = weights.block(config.depth - 1)
    if config.surgery_enabled:
        z = surgery_block(x, last, config.num_heads)
    else:
        z = standard_block(x, last, config.num_heads)
    proj = weights["proj"]
    O = TokenSequence(z.tokens @ proj, x.h, x.w)
    O_prime = x.patches @ proj
    return EncoderOutput(x, O, O_prime)


def tokens_to_map(patch_rows, h: int, w: int) -> Tensor:
    """[h*w, c] patch rows -> [c, h, w] feature map."""
    patch_rows = nt.as_tensor(patch_rows)
    return patch_rows.transpose(1, 0).reshape(patch_rows.shape[1], h, w)


def map_to_tokens(fmap) -> Tensor:
    fmap = nt.as_tensor(fmap)
    c, h, w = fmap.shape
    return fmap.reshape(c, h * w).transpose(1, 0)
