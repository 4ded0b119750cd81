"""Metrics, fold aggregation, ablations and the human-annotation workflow.

Triplets are compared by :meth:`Triplet.key`: relation id equality plus entity
text after whitespace collapsing and trimming (case-sensitive).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .data import Dataset, Triplet
from .decoding import DecodeConfig, ScoredCandidate, decode_relation
from .errors import DataError
from .model import ScoringBackend
from .relfilter import Embedder, FilterConfig, filter_relations
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)

CSV_HEADER = ["example_id", "rank", "head", "relation", "tail", "score", "annotator1", "annotator2"]
LABELS = {"true": True, "false": False, "": None}


def _as_triplet(x) -> Triplet | None:
    if x is None:
        return None
    if isinstance(x, Triplet):
        return x
    if isinstance(x, ScoredCandidate):
        return x.triplet
    seq = list(x)
    return _as_triplet(seq[0]) if seq else None


def _as_set(x) -> set:
    if x is None:
        return set()
    if isinstance(x, (Triplet, ScoredCandidate)):
        x = [x]
    return {_as_triplet(t).key() for t in x}


@dataclass
class MetricReport:
    mode: str
    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    per_fold: list[float] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.f1 if self.mode == "multi" else self.accuracy

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_fold)) if self.per_fold else self.value

    @property
    def std(self) -> float:
        # population standard deviation over folds/seeds
        return float(np.std(self.per_fold)) if self.per_fold else 0.0

    def to_json(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None and k != "extra"}
        out.update(mean=self.mean, std=self.std, **self.extra)
        return out


def f1_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def aggregate(mode: str, reports: Sequence[MetricReport]) -> MetricReport:
    """Mean/std over per-fold reports of the same mode."""
    values = [r.value for r in reports]
    agg = MetricReport(mode, per_fold=values)
    if mode == "multi":
        agg.precision = float(np.mean([r.precision for r in reports]))
        agg.recall = float(np.mean([r.recall for r in reports]))
        agg.f1 = float(np.mean(values))
    else:
        agg.accuracy = float(np.mean(values))
    return agg


def eval_single(gold: Dataset, predictions: Mapping[str, Any]) -> MetricReport:
    """Top-1 exact-match accuracy; missing predictions count as wrong."""
    n = hits = 0
    for ex in gold.examples:
        if not ex.is_single:
            raise DataError(f"example {ex.id!r} has {len(ex.triplets)} gold triplets; single mode needs one")
        n += 1
        pred = _as_triplet(predictions.get(ex.id))
        hits += pred is not None and pred.key() == ex.triplets[0].key()
    return MetricReport("single", accuracy=hits / n if n else 0.0, extra={"n": n, "correct": hits})


def eval_multi(gold: Dataset, predictions: Mapping[str, Iterable], macro: bool = False) -> MetricReport:
    """Precision/recall/F1 over exact triplet matches, duplicates counted once.

    Micro-averaged over the split by default; ``macro`` averages per-relation
    scores instead.
    """
    tp = n_pred = n_gold = 0
    per_rel: dict[str, list[int]] = {}
    for ex in gold.examples:
        g = {t.key() for t in ex.triplets}
        p = _as_set(predictions.get(ex.id))
        tp += len(g & p)
        n_pred += len(p)
        n_gold += len(g)
        for k in g | p:
            c = per_rel.setdefault(k[1], [0, 0, 0])
            c[0] += k in g and k in p
            c[1] += k in p
            c[2] += k in g
    if macro:
        ps = [c[0] / c[1] if c[1] else 0.0 for c in per_rel.values()]
        rs = [c[0] / c[2] if c[2] else 0.0 for c in per_rel.values()]
        fs = [f1_score(a, b) for a, b in zip(ps, rs)]
        if not per_rel:
            return MetricReport("multi", precision=0.0, recall=0.0, f1=0.0)
        return MetricReport("multi", precision=float(np.mean(ps)), recall=float(np.mean(rs)), f1=float(np.mean(fs)))
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return MetricReport("multi", precision=p, recall=r, f1=f1_score(p, r),
                        extra={"tp": tp, "n_pred": n_pred, "n_gold": n_gold})


def entity_predictions(gold: Dataset, backend: ScoringBackend, decode: DecodeConfig) -> dict[str, Triplet | None]:
    out = {}
    for ex in gold.examples:
        t = ex.triplets[0]
        cands = decode_relation(backend, ex.context, gold.relations[t.relation].template, decode)
        out[ex.id] = cands[0].triplet if cands else None
    return out


def eval_entity(gold: Dataset, backend: ScoringBackend, embedder: Embedder | None = None,
                decode: DecodeConfig | None = None) -> MetricReport:
    """Given the gold relation, both head and tail must come out exactly right.

    ``embedder`` is accepted for interface symmetry; no relation ranking happens.
    """
    preds = entity_predictions(gold, backend, decode or DecodeConfig())
    hits = sum(preds[ex.id] is not None and preds[ex.id].key() == ex.triplets[0].key() for ex in gold.examples)
    n = len(gold.examples)
    return MetricReport("entity", accuracy=hits / n if n else 0.0, extra={"n": n, "correct": hits})


ABLATIONS = ("full", "no-vocab-constraint", "greedy", "no-filter")


def ablation_configs(base) -> dict[str, Any]:
    """The base PredictionConfig and three variants, each toggling one setting."""
    return {
        "full": base,
        "no-vocab-constraint": replace(base, decode=replace(base.decode, vocab_constraint=False)),
        "greedy": replace(base, decode=replace(base.decode, greedy=True)),
        "no-filter": replace(base, filter=FilterConfig(delta=-1.0, fallback_top1=False)),
    }


def run_ablations(dataset: Dataset, backend: ScoringBackend, embedder: Embedder, base,
                  relation_ids: Sequence[str] | None = None, threads: int = 1) -> list[dict]:
    """One row per configuration: single-triplet accuracy and the mean number of
    relations that pass the filter (the decoding pool)."""
    from .pipeline import extract

    single = dataset.single()
    rel_ids = sorted(relation_ids if relation_ids is not None else single.relations)
    relations = [dataset.relations[r] for r in rel_ids]
    rows = []
    for name, cfg in ablation_configs(base).items():
        preds, top_scores, pool = {}, [], []
        for ex in single.examples:
            ranked = extract(backend, embedder, ex.context, relations, cfg, threads)
            preds[ex.id] = ranked
            top_scores.append(ranked[0].score if ranked else -math.inf)
            pool.append(len(filter_relations(embedder, ex.context, relations, cfg.filter)))
        rep = eval_single(single, preds)
        rows.append({"config": name, "accuracy": rep.accuracy, "n": rep.extra["n"],
                     "mean_pool_size": float(np.mean(pool)) if pool else 0.0,
                     "top_scores": top_scores})
    return rows


# ----------------------------------------------------------- human evaluation

@dataclass(frozen=True)
class AnnotationRecord:
    example_id: str
    rank: int
    triplet: Triplet
    score: float
    annotator1: bool | None = None
    annotator2: bool | None = None

    def __post_init__(self):
        if not 1 <= self.rank <= 5:
            raise DataError(f"rank must be in 1..5, got {self.rank}")


def export_human_eval(predictions: Mapping[str, Sequence[ScoredCandidate]], k: int = 5,
                      n_contexts: int = 200, seed: int = 0) -> tuple[list[AnnotationRecord], list[str]]:
    """Sample ``n_contexts`` example ids and list their top-``k`` predictions.

    Returns the records plus the ids that had fewer than ``k`` predictions.
    """
    ids = sorted(predictions)
    SplitMix64(derive_seed(seed, "humaneval-sample")).shuffle(ids)
    sample = sorted(ids[:n_contexts])
    records, short = [], []
    for eid in sample:
        ranked = list(predictions[eid])[:k]
        if len(ranked) < k:
            short.append(eid)
        records += [AnnotationRecord(eid, i + 1, c.triplet, c.score) for i, c in enumerate(ranked)]
    if short:
        log.warning("%d sampled contexts have fewer than %d predictions", len(short), k)
    return records, short


def _label_text(v: bool | None) -> str:
    return "" if v is None else ("true" if v else "false")


def write_annotations(records: Sequence[AnnotationRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.example_id, r.rank, r.triplet.head, r.triplet.relation, r.triplet.tail,
                        repr(float(r.score)), _label_text(r.annotator1), _label_text(r.annotator2)])


def read_annotations(path: str | Path) -> list[AnnotationRecord]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            try:
                labels = [LABELS[row[c].strip().lower()] for c in ("annotator1", "annotator2")]
                out.append(AnnotationRecord(row["example_id"], int(row["rank"]),
                                            Triplet(row["head"], row["relation"], row["tail"]),
                                            float(row["score"]), *labels))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad annotation row ({exc})") from None
    return out


def cohen_kappa(records: Sequence[AnnotationRecord] | Sequence[tuple[bool, bool]]) -> float:
    pairs = [(r.annotator1, r.annotator2) if isinstance(r, AnnotationRecord) else tuple(r) for r in records]
    if not pairs:
        raise ValueError("no records")
    if any(a is None or b is None for a, b in pairs):
        raise ValueError("every record needs both labels")
    n = len(pairs)
    p_o = sum(a == b for a, b in pairs) / n
    p1 = sum(a for a, _ in pairs) / n
    p2 = sum(b for _, b in pairs) / n
    p_e = p1 * p2 + (1 - p1) * (1 - p2)
    if p_e == 1:
        if p_o == 1:
            return 1.0
        raise ValueError("kappa undefined: chance agreement is 1")
    return (p_o - p_e) / (1 - p_e)


def rescore_with_annotations(gold: Dataset, predictions: Mapping[str, Sequence[ScoredCandidate]],
                             records: Sequence[AnnotationRecord]) -> MetricReport:
    """Top-1 accuracy over the annotated contexts, where a prediction also counts
    as correct when both annotators marked it true."""
    sample = sorted({r.example_id for r in records})
    approved = set()
    unlabeled = 0
    for r in records:
        if r.annotator1 is None or r.annotator2 is None:
            unlabeled += 1
            continue
        if r.annotator1 and r.annotator2:
            approved.add((r.example_id, r.triplet.key()))
    if unlabeled:
        log.warning("%d records lack a label and were ignored", unlabeled)
    by_id = {ex.id: ex for ex in gold.examples}
    hits = before = 0
    for eid in sample:
        top = _as_triplet(predictions.get(eid))
        if top is None or eid not in by_id:
            continue
        ok = top.key() in {t.key() for t in by_id[eid].triplets}
        before += ok
        hits += ok or (eid, top.key()) in approved
    n = len(sample)
    return MetricReport("single", accuracy=hits / n if n else 0.0,
                        extra={"n": n, "original_accuracy": before / n if n else 0.0})
