"""Global-bias removal and per-pixel open-vocabulary classification."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import weights as ovw
from .errors import ConfigError, ContractError, InputError

DEFAULT_LAMBDA = 0.3


@dataclass(frozen=True)
class BiasConfig:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not np.isfinite(self.lam):
            raise ConfigError("lambda must be finite")


@dataclass
class ClassGroup:
    name: str
    synonyms: list[str]
    embeddings: np.ndarray  # [n_syn, c]


@dataclass
class ClassVocabulary:
    groups: list[ClassGroup]

    def __post_init__(self):
        if not self.groups:
            raise ConfigError("vocabulary is empty")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ConfigError("class display names must be unique")
        dims = {g.embeddings.shape[1] for g in self.groups}
        if len(dims) != 1:
            raise ConfigError("embeddings have inconsistent dimensions")
        for g in self.groups:
            if not g.synonyms or len(g.synonyms) != len(g.embeddings):
                raise ConfigError(f"class {g.name!r} needs one embedding per synonym")
            norms = np.linalg.norm(g.embeddings, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ConfigError(f"class {g.name!r} has non unit-norm embeddings")

    @property
    def names(self) -> list[str]:
        return [g.name for g in self.groups]

    @property
    def dim(self) -> int:
        return self.groups[0].embeddings.shape[1]

    @property
    def embedding_matrix(self) -> np.ndarray:
        return np.concatenate([g.embeddings for g in self.groups], axis=0)

    @property
    def synonym_group(self) -> np.ndarray:
        return np.concatenate([np.full(len(g.synonyms), i) for i, g in enumerate(self.groups)])

    def __len__(self):
        return len(self.groups)


def synth_embedding(text: str, dim: int) -> np.ndarray:
    """Deterministic unit vector keyed by the SHA-256 of ``text``."""
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


def parse_vocabulary(text: str) -> list[tuple[str, list[str]]]:
    """Lines of ``display_name = syn1 | syn2``; a bare name is its own single synonym."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            name, rhs = (s.strip() for s in line.split("=", 1))
            syns = [s.strip() for s in rhs.split("|") if s.strip()]
        else:
            name, syns = line, [line]
        if not name or not syns:
            raise InputError(f"vocabulary line {lineno}: empty class or synonym list")
        entries.append((name, syns))
    return entries


def build_vocabulary(entries, dim: int, table: dict[str, np.ndarray] | None = None) -> ClassVocabulary:
    groups = []
    for name, syns in entries:
        embs = []
        for s in syns:
            if table is not None:
                if s not in table:
                    raise InputError(f"no embedding for synonym {s!r}")
                e = np.asarray(table[s], dtype=np.float64).reshape(-1)
                if e.shape[0] != dim:
                    raise ConfigError(f"embedding for {s!r} has dim {e.shape[0]}, expected {dim}")
                e = e / np.linalg.norm(e)
            else:
                e = synth_embedding(s, dim)
            embs.append(e)
        groups.append(ClassGroup(name, list(syns), np.stack(embs)))
    return ClassVocabulary(groups)


def load_vocabulary(path, dim: int, embeddings_path=None) -> ClassVocabulary:
    entries = parse_vocabulary(Path(path).read_text(encoding="utf-8"))
    table = ovw.load(embeddings_path) if embeddings_path else None
    return build_vocabulary(entries, dim, table)


def save_vocabulary(path, vocab: ClassVocabulary, embeddings_path=None) -> None:
    lines = [f"{g.name} = {' | '.join(g.synonyms)}" for g in vocab.groups]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if embeddings_path:
        ovw.save(embeddings_path, {s: e for g in vocab.groups for s, e in zip(g.synonyms, g.embeddings)})


# ---------------------------------------------------------------- head


def alleviate_global_bias(tokens, cfg: BiasConfig = BiasConfig()) -> np.ndarray:
    """Patch rows minus lambda times the [CLS] row (row 0)."""
    tokens = np.asarray(getattr(tokens, "data", tokens), dtype=np.float64)
    if tokens.shape[-2] < 2:
        raise ContractError("need a [CLS] row and at least one patch row")
    return tokens[..., 1:, :] - cfg.lam * tokens[..., :1, :]


def similarity_logits(patches, vocab: ClassVocabulary) -> np.ndarray:
    """Cosine similarity of every patch row with every synonym embedding."""
    patches = np.asarray(getattr(patches, "data", patches), dtype=np.float64)
    if patches.shape[-1] != vocab.dim:
        raise ConfigError(f"feature dim {patches.shape[-1]} != vocabulary dim {vocab.dim}")
    norms = np.linalg.norm(patches, axis=-1, keepdims=True)
    zero = np.flatnonzero(norms.reshape(-1) == 0)
    if zero.size:
        raise ContractError(f"zero-norm patch row at index {int(zero[0])}")
    return np.clip((patches / norms) @ vocab.embedding_matrix.T, -1.0, 1.0)


def group_reduce(logits, vocab: ClassVocabulary) -> np.ndarray:
    """Max over each group's synonyms: [..., n_synonyms] -> [..., n_groups]."""
    logits = np.asarray(logits)
    owner = vocab.synonym_group
    out = np.empty(logits.shape[:-1] + (len(vocab),))
    for gi in range(len(vocab)):
        out[..., gi] = logits[..., owner == gi].max(axis=-1)
    return out


def segment_argmax(group_scores, h: int | None = None, w: int | None = None) -> np.ndarray:
    """Per-pixel argmax over groups (first index wins ties), as uint8."""
    scores = np.asarray(group_scores)
    if not np.isfinite(scores).all():
        raise ContractError("scores must be finite")
    mask = scores.argmax(axis=-1).astype(np.uint8)
    if h is not None and w is not None:
        mask = mask.reshape(h, w)
    return mask


def classify_patches(patches, vocab: ClassVocabulary) -> np.ndarray:
    return group_reduce(similarity_logits(patches, vocab), vocab)
