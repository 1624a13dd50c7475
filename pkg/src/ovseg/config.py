"""Plain-text run configuration: ``key = value`` lines with ``#`` comments.

Every accepted key is declared in :data:`SCHEMA`; anything else is rejected so
that a stale config file fails loudly instead of being silently ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .distill import DistillConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .ovhead import BiasConfig
from .upsampler import TrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: object
    help: str


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA: tuple[Key, ...] = (
    Key("seed", int, 0, "master seed; seeds training, distillation and data generation"),
    Key("encoder.image_size", int, 224, "encoder input side in pixels"),
    Key("encoder.patch_size", int, 16, "patch side; upsampling steps = log2(patch_size)"),
    Key("encoder.depth", int, 4, "number of transformer blocks"),
    Key("encoder.embed_dim", int, 64, "token width"),
    Key("encoder.num_heads", int, 4, "attention heads"),
    Key("encoder.proj_dim", int, 32, "joint image/text embedding width"),
    Key("encoder.surgery", bool, True, "self-self attention in the final block at inference"),
    Key("encoder.seed", int, 0, "seed for synthetic frozen encoder weights (gen-toy-data)"),
    Key("jbu.radius", int, 5, "JBU window radius (5 -> 11x11)"),
    Key("jbu.tau_spatial", float, 2.0, "initial spatial kernel width"),
    Key("jbu.tau_range", float, 1.0, "initial range kernel temperature"),
    Key("jbu.hidden", int, 32, "hidden width of the guidance MLP"),
    Key("train.steps", int, 200, "upsampler optimisation steps"),
    Key("train.lr", float, 1e-3, "upsampler Adam learning rate"),
    Key("train.gamma", float, 0.1, "weight of the image reconstruction term"),
    Key("train.batch", int, 1, "crops per step"),
    Key("train.views", int, 2, "augmented views per crop (identity included)"),
    Key("train.crop", int, 0, "crop side; 0 means encoder.image_size"),
    Key("distill.steps", int, 100, "student optimisation steps"),
    Key("distill.lr", float, 1e-3, "student Adam learning rate"),
    Key("distill.tau", float, 0.07, "initial contrastive temperature"),
    Key("distill.k", int, 7, "regions per side for the local term"),
    Key("distill.w_contrast", float, 1.0, "weight of the contrastive term"),
    Key("distill.w_cls", float, 1.0, "weight of the [CLS] cosine term"),
    Key("distill.w_local", float, 1.0, "weight of the regional cosine term"),
    Key("distill.batch", int, 16, "pairs per step"),
    Key("infer.long_side", int, 448, "resize target for the longer image side"),
    Key("infer.window", int, 224, "sliding window side"),
    Key("infer.stride", int, 112, "sliding window stride"),
    Key("infer.lambda", float, 0.3, "global bias removal strength"),
    Key("infer.steps", int, 0, "upsampling steps; 0 means log2(encoder.patch_size)"),
    Key("infer.ignore_index", int, 255, "ground-truth label skipped by eval"),
    Key("infer.num_classes", int, 0, "classes for eval; 0 infers from the masks"),
    Key("paths.encoder", str, "encoder.ovw", "frozen encoder weights (OVW1)"),
    Key("paths.upsampler", str, "upsampler.ovw", "upsampler weights written/read"),
    Key("paths.upsampler_log", str, "upsampler_loss.csv", "per-step upsampler losses"),
    Key("paths.corpus", str, "corpus", "directory of *.ppm training images"),
    Key("paths.manifest", str, "pairs.csv", "CSV of opt_path,sar_path rows"),
    Key("paths.student", str, "student.ovw", "distilled SAR encoder weights"),
    Key("paths.distill_log", str, "distill_loss.csv", "per-step distillation losses"),
    Key("paths.vocab_embeddings", str, "", "optional OVW1 table synonym -> embedding"),
    Key("paths.metrics", str, "metrics.csv", "eval report"),
)

_BY_NAME = {k.name: k for k in SCHEMA}


def _convert(key: Key, raw: str):
    try:
        if key.kind is bool:
            return _bool(raw)
        return key.kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{key.name}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        name, value = (s.strip() for s in line.split("=", 1))
        if name not in _BY_NAME:
            raise ConfigError(f"{source}:{lineno}: unknown key {name!r}")
        out[name] = value
    return out


def schema_help() -> str:
    width = max(len(k.name) for k in SCHEMA)
    return "\n".join(f"  {k.name:<{width}}  {k.help} (default: {format_value(k.default)})"
                     for k in SCHEMA)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=lambda: {k.name: k.default for k in SCHEMA})

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            cfg.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
        if overrides:
            cfg.update(overrides)
        return cfg

    def update(self, raw: dict[str, str]) -> None:
        for name, value in raw.items():
            if name not in _BY_NAME:
                raise ConfigError(f"unknown key {name!r}")
            self.values[name] = _convert(_BY_NAME[name], str(value))

    def __getitem__(self, name: str):
        return self.values[name]

    def to_text(self) -> str:
        return "".join(f"{k.name} = {format_value(self.values[k.name])}\n" for k in SCHEMA)

    # typed views -------------------------------------------------------

    def encoder(self) -> EncoderConfig:
        v = self.values
        return EncoderConfig(v["encoder.image_size"], v["encoder.patch_size"], v["encoder.depth"],
                             v["encoder.embed_dim"], v["encoder.num_heads"], v["encoder.proj_dim"],
                             v["encoder.surgery"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(steps=v["train.steps"], lr=v["train.lr"], gamma=v["train.gamma"],
                           batch=v["train.batch"], views=v["train.views"], crop=v["train.crop"],
                           seed=v["seed"])

    def jbu_kwargs(self) -> dict:
        v = self.values
        return {"radius": v["jbu.radius"], "hidden": v["jbu.hidden"],
                "tau_spatial": v["jbu.tau_spatial"], "tau_range": v["jbu.tau_range"]}

    def distill(self) -> DistillConfig:
        v = self.values
        return DistillConfig(tau=v["distill.tau"], k=v["distill.k"], w_contrast=v["distill.w_contrast"],
                             w_cls=v["distill.w_cls"], w_local=v["distill.w_local"],
                             steps=v["distill.steps"], lr=v["distill.lr"], batch=v["distill.batch"],
                             seed=v["seed"])

    def bias(self) -> BiasConfig:
        return BiasConfig(lam=self.values["infer.lambda"])
