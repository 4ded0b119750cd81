"""Domain types, JSONL/JSON ingestion and the zero-shot fold splitter."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataError, TemplateError
from .rng import SplitMix64
from .templates import Template, validate_template
from .tokenizer import normalize, tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Triplet:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        if not self.head.split() or not self.tail.split():
            raise DataError(f"empty entity in triplet {self!r}")

    def key(self) -> tuple[str, str, str]:
        """Comparison key: relation id plus token-normalized, case-sensitive entities."""
        return (normalize(self.head), self.relation, normalize(self.tail))

    def to_json(self) -> dict:
        return {"head": self.head, "relation": self.relation, "tail": self.tail}


@dataclass(frozen=True)
class Example:
    id: str
    context: str
    triplets: tuple[Triplet, ...]

    @property
    def is_single(self) -> bool:
        return len(self.triplets) == 1

    def relations(self) -> set[str]:
        return {t.relation for t in self.triplets}

    def unmatched_entities(self) -> list[str]:
        """Entities that do not occur as token subsequences of the context."""
        ctx = tokenize(self.context)
        return [e for t in self.triplets for e in (t.head, t.tail) if find_span(ctx, tokenize(e)) < 0]

    def to_json(self) -> dict:
        return {"id": self.id, "text": self.context, "triplets": [t.to_json() for t in self.triplets]}


def find_span(tokens: Sequence[str], span: Sequence[str], start: int = 0) -> int:
    n = len(span)
    if n == 0:
        return -1
    for i in range(start, len(tokens) - n + 1):
        if tokens[i:i + n] == list(span):
            return i
    return -1


@dataclass(frozen=True)
class RelationSpec:
    id: str
    name: str
    description: str
    templates: tuple[Template, ...]

    def __post_init__(self):
        if not self.description.strip():
            raise DataError(f"relation {self.id!r} has an empty description")
        if not self.templates:
            raise DataError(f"relation {self.id!r} has no templates")

    @property
    def template(self) -> Template:
        return self.templates[0]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "description": self.description,
            "templates": [t.pattern for t in self.templates],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "RelationSpec":
        rid = obj["id"]
        try:
            templates = tuple(validate_template(p, rid) for p in obj["templates"])
        except TemplateError as exc:
            raise DataError(f"relation {rid!r}: {exc}") from None
        return cls(rid, obj.get("name", rid), obj.get("description", ""), templates)


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]
    relations: Mapping[str, RelationSpec]
    flags: Mapping[str, tuple[str, ...]] = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.examples)

    def __post_init__(self):
        for ex in self.examples:
            for t in ex.triplets:
                if t.relation not in self.relations:
                    raise DataError(f"example {ex.id!r} references unknown relation {t.relation!r}")

    def single(self) -> "Dataset":
        return self._subset([e for e in self.examples if e.is_single])

    def multi(self) -> "Dataset":
        return self._subset([e for e in self.examples if not e.is_single])

    def _subset(self, examples: Iterable[Example]) -> "Dataset":
        examples = tuple(examples)
        ids = {e.id for e in examples}
        return Dataset(examples, self.relations, {k: v for k, v in self.flags.items() if k in ids})

    def strict(self) -> "Dataset":
        """Drop examples flagged for entities missing from their context."""
        return self._subset(e for e in self.examples if e.id not in self.flags)


@dataclass(frozen=True)
class FoldSpec:
    seed: int
    m: int
    v: int
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "seed": self.seed, "m": self.m, "v": self.v,
            "train": list(self.train), "validation": list(self.validation), "test": list(self.test),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "FoldSpec":
        fold = cls(int(obj["seed"]), int(obj["m"]), int(obj["v"]),
                   tuple(obj["train"]), tuple(obj["validation"]), tuple(obj["test"]))
        sets = [set(fold.train), set(fold.validation), set(fold.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("fold splits overlap")
        if len(fold.test) != fold.m or len(fold.validation) != fold.v:
            raise DataError("fold sizes do not match m and v")
        return fold

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FoldSpec":
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed fold file ({exc})") from None


def load_relations(path: str | Path) -> dict[str, RelationSpec]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, list):
        raise DataError(f"{path}: relation registry must be a JSON array")
    registry: dict[str, RelationSpec] = {}
    for i, obj in enumerate(raw):
        try:
            spec = RelationSpec.from_json(obj)
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: relation entry {i} is malformed ({exc})") from None
        if spec.id in registry:
            raise DataError(f"{path}: duplicate relation id {spec.id!r}")
        registry[spec.id] = spec
    return registry


def save_relations(relations: Mapping[str, RelationSpec], path: str | Path) -> None:
    payload = [relations[k].to_json() for k in relations]
    Path(path).write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def parse_example(obj: Mapping, row: int) -> Example:
    if not isinstance(obj, Mapping):
        raise TypeError("row is not a JSON object")
    ex_id = obj.get("id")
    ex_id = f"row{row}" if ex_id is None else str(ex_id)
    triplets = tuple(Triplet(t["head"], t["relation"], t["tail"]) for t in obj.get("triplets", []))
    return Example(ex_id, obj["text"], triplets)


def load_dataset(path: str | Path, relation_registry_path: str | Path | None = None,
                 relations: Mapping[str, RelationSpec] | None = None) -> Dataset:
    """Load a JSONL dataset and validate it against a relation registry.

    Rows whose entities are not found in their context are kept and listed in
    ``Dataset.flags``; use :meth:`Dataset.strict` to drop them.
    """
    if relations is None:
        if relation_registry_path is None:
            raise ValueError("need a relation registry path or a registry")
        relations = load_relations(relation_registry_path)
    examples: list[Example] = []
    seen: set[str] = set()
    flags: dict[str, tuple[str, ...]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ex = parse_example(json.loads(line), lineno)
            except (json.JSONDecodeError, KeyError, TypeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: malformed line ({exc})") from None
            if ex.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate example id {ex.id!r}")
            for t in ex.triplets:
                if t.relation not in relations:
                    raise DataError(f"{path}:{lineno}: unknown relation id {t.relation!r}")
            seen.add(ex.id)
            missing = ex.unmatched_entities()
            if missing:
                flags[ex.id] = tuple(f"entity not in context: {e}" for e in missing)
            examples.append(ex)
    if flags:
        log.warning("%s: %d example(s) have entities not found in their context", path, len(flags))
    return Dataset(tuple(examples), dict(relations), flags)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in dataset.examples:
            fh.write(json.dumps(ex.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def split_folds(relations: Iterable[str], m: int, v: int = 5, seed: int = 0) -> FoldSpec:
    """Partition relation ids into disjoint train/validation/test sets.

    Ids are sorted, shuffled with Fisher-Yates driven by ``SplitMix64(seed)``;
    the first ``m`` become test, the next ``v`` validation, the rest train.
    """
    ids = sorted(set(relations))
    if m < 0 or v < 0:
        raise DataError("m and v must be non-negative")
    if m + v >= len(ids):
        raise DataError(f"m + v = {m + v} leaves no training relations out of {len(ids)}")
    SplitMix64(seed).shuffle(ids)
    return FoldSpec(seed, m, v, tuple(sorted(ids[m + v:])), tuple(sorted(ids[m:m + v])), tuple(sorted(ids[:m])))


def project(dataset: Dataset, relation_ids: Iterable[str], require_all: bool = False) -> Dataset:
    """Restrict a dataset to ``relation_ids``.

    Each example keeps only its triplets with those relations and is dropped if
    none remain. With ``require_all`` an example survives only when *every*
    triplet is in the set, so no out-of-set relation text leaks into a split.
    """
    keep = set(relation_ids)
    unknown = keep - set(dataset.relations)
    if unknown:
        raise DataError(f"unknown relation ids: {sorted(unknown)}")
    out = []
    for ex in dataset.examples:
        triplets = tuple(t for t in ex.triplets if t.relation in keep)
        if not triplets or (require_all and len(triplets) != len(ex.triplets)):
            continue
        out.append(ex if len(triplets) == len(ex.triplets) else Example(ex.id, ex.context, triplets))
    return dataset._subset(out)
