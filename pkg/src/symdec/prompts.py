"""Prompt grouping: a fixed set of prompts built from frequent object classes.

Each prompt concatenates K class names; the whole set of M prompts is shared
by every image in a run.  Prompt embeddings start from a deterministic
per-class hash embedding (or an externally exported table) and are trainable
from there on; they are never re-derived from text during training.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridError, Tensor, csym

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

DEFAULT_PROMPTS = 25
DEFAULT_CLASSES_PER_PROMPT = 4
DEFAULT_TEXT_DIM = 64


class PromptError(ValueError):
    """Invalid vocabulary or prompt-set construction request."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered object-class list; entries may contain spaces."""

    classes: tuple[str, ...]

    def __post_init__(self):
        if not self.classes:
            raise PromptError("vocabulary is empty")
        trimmed = [c.strip() for c in self.classes]
        if any(not c for c in trimmed):
            raise PromptError("vocabulary contains blank entries")
        if len(set(trimmed)) != len(trimmed):
            raise PromptError("vocabulary entries are not unique after trimming")
        object.__setattr__(self, "classes", tuple(trimmed))

    def __len__(self) -> int:
        return len(self.classes)


def load_vocabulary(path) -> Vocabulary:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    return Vocabulary(tuple(ln for ln in lines if ln))


def default_vocabulary() -> Vocabulary:
    """The bundled frequent-object class list."""
    text = importlib.resources.files("symdec.data").joinpath("vocabulary.txt").read_text("utf-8")
    return Vocabulary(tuple(ln.strip() for ln in text.splitlines() if ln.strip()))


@dataclass(frozen=True)
class PromptSet:
    """M prompts of exactly K class names each, with build provenance."""

    groups: tuple[tuple[str, ...], ...]
    policy: str
    seed: int

    @property
    def prompts(self) -> list[str]:
        return [" ".join(g) for g in self.groups]

    @property
    def num_prompts(self) -> int:
        return len(self.groups)

    @property
    def classes_per_prompt(self) -> int:
        return len(self.groups[0])

    def to_text(self) -> str:
        return "\n".join(self.prompts) + "\n"


def build_prompt_set(
    vocab: Vocabulary,
    num_prompts: int = DEFAULT_PROMPTS,
    classes_per_prompt: int = DEFAULT_CLASSES_PER_PROMPT,
    policy: str = "sequential",
    seed: int = 0,
) -> PromptSet:
    """Partition the leading vocabulary entries into prompts, K classes each.

    `sequential` consumes entries in vocabulary order; `shuffled` applies one
    seeded permutation first.  No class is reused across prompts.
    """
    m, k = int(num_prompts), int(classes_per_prompt)
    if m < 1 or k < 1:
        raise PromptError(f"need at least one prompt and one class, got M={m}, K={k}")
    needed = m * k
    if needed > len(vocab):
        raise PromptError(
            f"prompt set needs M*K = {m}*{k} = {needed} classes, vocabulary has {len(vocab)}"
        )
    if policy == "sequential":
        order = list(vocab.classes)
    elif policy == "shuffled":
        rng = np.random.default_rng(seed)
        order = [vocab.classes[i] for i in rng.permutation(len(vocab))]
    else:
        raise PromptError(f"unknown selection policy {policy!r}")
    groups = tuple(tuple(order[i * k : (i + 1) * k]) for i in range(m))
    return PromptSet(groups=groups, policy=policy, seed=seed)


@dataclass
class TextTokens:
    """One embedding row per prompt; trainable rows are optimizer-owned."""

    embeddings: Tensor  # [M, D]
    trainable: bool = True

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise GridError(f"text embeddings must be rank 2, got {self.embeddings.shape}")
        if not self.embeddings.is_finite():
            raise GridError("text embeddings contain non-finite values")

    @property
    def num_prompts(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def class_vector(name: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic embedding of one class name: its hash keys a counter RNG."""
    key = np.array([seed & MASK64, fnv1a64(name.lower().encode("utf-8"))], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal(dim)


def embed_prompts(prompt_set: PromptSet, text_dim: int = DEFAULT_TEXT_DIM, seed: int = 0) -> TextTokens:
    """Sum each prompt's class vectors and normalize to unit length."""
    if text_dim < 1:
        raise PromptError("text dimension must be positive")
    rows = np.zeros((prompt_set.num_prompts, text_dim), dtype=np.float64)
    for i, group in enumerate(prompt_set.groups):
        if not group:
            raise PromptError(f"prompt {i} is empty")
        for name in group:
            rows[i] += class_vector(name, text_dim, seed)
        norm = np.linalg.norm(rows[i])
        if norm == 0.0:
            raise PromptError(f"prompt {i} produced a zero embedding")
        rows[i] /= norm
    return TextTokens(embeddings=Tensor(rows.astype(np.float32), requires_grad=True), trainable=True)


def load_text_embeddings(path) -> TextTokens:
    """Read a rank-2 CSYM embedding table; rows are marked trainable."""
    arr = csym.read_tensor(path)
    if arr.ndim != 2:
        raise csym.CsymFormatError(f"{path}: text embeddings must be rank 2, got rank {arr.ndim}")
    return TextTokens(embeddings=Tensor(arr, requires_grad=True), trainable=True)


def save_text_embeddings(path, tokens: TextTokens) -> None:
    csym.write_tensor(path, tokens.embeddings.data)
