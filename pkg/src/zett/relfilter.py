"""Context-to-description similarity filter over candidate relations."""
from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .data import RelationSpec
from .errors import DataError
from .rng import fnv1a_64
from .tokenizer import tokenize

PAPER_DELTA = 0.85  # operating point for a pretrained sentence encoder; recalibrate for others


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray:
        """Unit-norm vector (zero vector only for text with no usable tokens)."""


class HashedBowEmbedder:
    """Lowercased bag of words hashed into ``dim`` buckets, TF-weighted, L2-normalized.

    Punctuation-only tokens are skipped so sentences are not all alike through
    their final period.
    """

    def __init__(self, dim: int = 256):
        if dim <= 0 or dim & (dim - 1):
            raise ValueError("dim must be a power of two")
        self.dim = dim

    def bucket(self, token: str) -> int:
        return fnv1a_64(token.lower().encode("utf-8")) % self.dim

    def embed(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in tokenize(text):
            if all(ch in string.punctuation for ch in tok):
                continue
            v[self.bucket(tok)] += 1.0
        n = np.linalg.norm(v)
        return v / n if n else v


class PrecomputedEmbedder:
    """Vectors looked up by sha256 of the text, e.g. produced offline by an
    external sentence encoder. File format: ``{"<hex digest>": [floats]}``."""

    def __init__(self, table: dict[str, Sequence[float]], fallback: Embedder | None = None):
        self.table = {k: _unit(np.asarray(v, dtype=np.float64)) for k, v in table.items()}
        dims = {len(v) for v in self.table.values()}
        if len(dims) > 1:
            raise DataError(f"inconsistent embedding dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else (fallback.dim if fallback else 0)
        self.fallback = fallback

    @staticmethod
    def key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @classmethod
    def load(cls, path: str | Path, fallback: Embedder | None = None) -> "PrecomputedEmbedder":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), fallback)

    def embed(self, text: str) -> np.ndarray:
        vec = self.table.get(self.key(text))
        if vec is not None:
            return vec
        if self.fallback is None:
            raise DataError(f"no precomputed embedding for text {text[:40]!r}")
        return self.fallback.embed(text)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n else v


@dataclass(frozen=True)
class FilterConfig:
    delta: float = PAPER_DELTA
    fallback_top1: bool = True

    def __post_init__(self):
        # anything above 1 behaves like 1; below -1 like -1
        object.__setattr__(self, "delta", float(min(1.0, max(-1.0, self.delta))))


def similarity(embedder: Embedder, context: str, relation: RelationSpec) -> float:
    if not relation.description:
        raise DataError(f"relation {relation.id!r} has no description")
    s = float(np.dot(embedder.embed(context), embedder.embed(relation.description)))
    return min(1.0, max(-1.0, s))


def score_relations(embedder: Embedder, context: str, relations: Sequence[RelationSpec]) -> list[float]:
    c = embedder.embed(context)
    return [min(1.0, max(-1.0, float(np.dot(c, embedder.embed(r.description))))) for r in relations]


def filter_relations(embedder: Embedder, context: str, relations: Sequence[RelationSpec],
                     cfg: FilterConfig, scores: Sequence[float] | None = None) -> list[tuple[RelationSpec, float]]:
    """Relations with similarity >= delta, input order kept, paired with their
    similarity. If none pass and ``fallback_top1``, the best one (ties to the
    smallest id) survives alone."""
    if not relations:
        raise ValueError("no candidate relations")
    if scores is None:
        scores = score_relations(embedder, context, relations)
    kept = [(r, s) for r, s in zip(relations, scores) if s >= cfg.delta]
    if not kept and cfg.fallback_top1:
        best = min(range(len(relations)), key=lambda i: (-scores[i], relations[i].id))
        kept = [(relations[best], scores[best])]
    return kept


def calibrate_delta(grid: Sequence[float], evaluate: Callable[[float], float]) -> tuple[float, dict[float, float]]:
    """Grid value maximizing ``evaluate(delta)`` (validation accuracy); ties go
    to the smaller delta. Returns the winner and the full scan."""
    if not grid:
        raise ValueError("empty delta grid")
    scan = {float(d): float(evaluate(float(d))) for d in grid}
    best = min(scan, key=lambda d: (-scan[d], d))
    return best, scan
