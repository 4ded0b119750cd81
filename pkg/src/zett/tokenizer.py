"""Word-level tokenizer with reserved structural tokens.

Stands in for the subword tokenizer of a pre-trained backbone. Ids 0-5 are
reserved for PAD, UNK, EOS and the three sentinels; corpus tokens follow in
(descending frequency, ascending string) order.
"""
from __future__ import annotations

import hashlib
import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, EOS, MASK1, MASK2, END = range(6)
RESERVED = ("<pad>", "<unk>", "</s>", "<X>", "<Y>", "<Z>")
SENTINELS = {"<X>": MASK1, "<Y>": MASK2, "<Z>": END}
STRUCTURAL = frozenset({EOS, MASK1, MASK2, END})

_PUNCT = frozenset(string.punctuation)


def tokenize(text: str) -> list[str]:
    """Split on whitespace, then peel leading/trailing ASCII punctuation.

    Each peeled punctuation character becomes its own token; the sentinel
    literals ``<X>``, ``<Y>`` and ``<Z>`` are kept whole.
    """
    out: list[str] = []
    for chunk in text.split():
        if chunk in SENTINELS:
            out.append(chunk)
            continue
        start, stop = 0, len(chunk)
        while start < stop and chunk[start] in _PUNCT:
            start += 1
        while stop > start and chunk[stop - 1] in _PUNCT:
            stop -= 1
        out.extend(chunk[:start])
        if start < stop:
            out.append(chunk[start:stop])
        out.extend(chunk[stop:])
    return out


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    min_count: int = 1
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def digest(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens[len(RESERVED):]), "min_count": self.min_count}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(RESERVED + tuple(obj["tokens"]), int(obj.get("min_count", 1)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(t for t in tokenize(text) if t not in SENTINELS)
    kept = sorted((tok for tok, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(RESERVED + tuple(kept), min_count)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return [SENTINELS[t] if t in SENTINELS else vocab.id(t) for t in tokenize(text)]


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    n = len(vocab)
    for i in ids:
        if not 0 <= int(i) < n:
            raise ValueError(f"token id {i} out of range for vocabulary of size {n}")
    return " ".join(vocab.tokens[int(i)] for i in ids)
