"""Relation filtering, per-relation decoding and global ranking of triplets."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .data import Dataset, RelationSpec, Triplet
from .decoding import DecodeConfig, ScoredCandidate, decode_relation
from .errors import DataError
from .model import ScoringBackend
from .relfilter import Embedder, FilterConfig, filter_relations, score_relations

POLICIES = ("first", "max-over-templates")
# validation thresholds documented for the original encoder; magnitudes 2.0 .. 3.5
PAPER_THRESHOLDS = (-2.5, -2.6)


def default_threshold_grid() -> list[float]:
    return [round(-3.5 + 0.1 * i, 1) for i in range(16)]


@dataclass(frozen=True)
class PredictionConfig:
    mode: str = "single"
    multi_threshold: float | None = None
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    multi_template_policy: str = "first"

    def __post_init__(self):
        if self.mode not in ("single", "multi"):
            raise ValueError(f"mode must be 'single' or 'multi', got {self.mode!r}")
        if self.mode == "multi" and self.multi_threshold is None:
            raise ValueError("multi mode requires multi_threshold")
        if self.multi_template_policy not in POLICIES:
            raise ValueError(f"multi_template_policy must be one of {POLICIES}")


def _merge(cands: Iterable[ScoredCandidate]) -> list[ScoredCandidate]:
    best: dict[tuple, ScoredCandidate] = {}
    for c in cands:
        k = c.triplet.key()
        if k not in best or c.score > best[k].score:
            best[k] = c
    return sorted(best.values(), key=ScoredCandidate.sort_key)


def decode_relations(backend: ScoringBackend, context: str, relations: Sequence[RelationSpec],
                     similarities: Sequence[float], cfg: PredictionConfig,
                     threads: int = 1) -> dict[str, list[ScoredCandidate]]:
    """Candidates per relation id, each list already deduplicated and ranked."""
    def run(item):
        rel, sim = item
        templates = rel.templates if cfg.multi_template_policy == "max-over-templates" else rel.templates[:1]
        cands = [replace(c, relation_similarity=sim)
                 for tpl in templates for c in decode_relation(backend, context, tpl, cfg.decode)]
        return rel.id, _merge(cands)

    items = list(zip(relations, similarities))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return dict(pool.map(run, items))
    return dict(map(run, items))


def extract(backend: ScoringBackend, embedder: Embedder, context: str,
            candidate_relations: Sequence[RelationSpec], cfg: PredictionConfig,
            threads: int = 1) -> list[ScoredCandidate]:
    """Ranked candidates over the relations that pass the similarity filter.

    Order is (score desc, relation id, head, tail) regardless of ``threads``.
    """
    kept = filter_relations(embedder, context, candidate_relations, cfg.filter)
    per_rel = decode_relations(backend, context, [r for r, _ in kept], [s for _, s in kept], cfg, threads)
    return _merge(c for cands in per_rel.values() for c in cands)


def predict_single(ranked: Sequence[ScoredCandidate]) -> Triplet | None:
    return ranked[0].triplet if ranked else None


def predict_multi(ranked: Sequence[ScoredCandidate], threshold: float) -> list[Triplet]:
    return [c.triplet for c in ranked if c.score > threshold]


@dataclass
class CandidatePool:
    """Unfiltered per-relation decodes for one example, so filter thresholds and
    multi thresholds can be swept without decoding again."""

    example_id: str
    relations: tuple[RelationSpec, ...]
    similarities: tuple[float, ...]
    candidates: Mapping[str, list[ScoredCandidate]]

    def ranked(self, fcfg: FilterConfig) -> list[ScoredCandidate]:
        kept = filter_relations(None, "", self.relations, fcfg, scores=self.similarities)
        return _merge(c for r, _ in kept for c in self.candidates[r.id])


def build_pools(backend: ScoringBackend, embedder: Embedder, dataset: Dataset,
                relation_ids: Sequence[str], cfg: PredictionConfig, threads: int = 1) -> list[CandidatePool]:
    relations = tuple(dataset.relations[r] for r in sorted(relation_ids))
    if not relations:
        raise DataError("no candidate relations")
    pools = []
    for ex in dataset.examples:
        sims = tuple(score_relations(embedder, ex.context, relations))
        cands = decode_relations(backend, ex.context, relations, sims, cfg, threads)
        pools.append(CandidatePool(ex.id, relations, sims, cands))
    return pools


def predict_dataset(backend: ScoringBackend, embedder: Embedder, dataset: Dataset,
                    relation_ids: Sequence[str], cfg: PredictionConfig,
                    threads: int = 1) -> dict[str, list[ScoredCandidate]]:
    """Ranked candidates for every example, keyed by example id."""
    relations = [dataset.relations[r] for r in sorted(relation_ids)]
    if not relations:
        raise DataError("no candidate relations")
    return {ex.id: extract(backend, embedder, ex.context, relations, cfg, threads) for ex in dataset.examples}


def calibrate_multi_threshold(pools_or_ranked: Mapping[str, Sequence[ScoredCandidate]], gold: Dataset,
                              grid: Sequence[float] | None = None) -> tuple[float, dict[float, float]]:
    """Grid threshold maximizing multi-triplet F1 on ``gold``; ties go to the
    smaller (more permissive) threshold. Returns the winner and the scan."""
    from .evaluation import eval_multi

    grid = default_threshold_grid() if grid is None else list(grid)
    if not grid:
        raise ValueError("empty threshold grid")
    scan = {}
    for th in grid:
        preds = {eid: predict_multi(r, th) for eid, r in pools_or_ranked.items()}
        scan[float(th)] = eval_multi(gold, preds).f1
    best = min(scan, key=lambda t: (-scan[t], t))
    return best, scan


# ------------------------------------------------------------------ file IO

def prediction_record(example_id: str, ranked: Sequence[ScoredCandidate]) -> dict:
    return {
        "id": example_id,
        "predictions": [{**c.triplet.to_json(), "score": float(c.score)} for c in ranked],
    }


def save_predictions(preds: Mapping[str, Sequence[ScoredCandidate]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for eid, ranked in preds.items():
            fh.write(json.dumps(prediction_record(eid, ranked), sort_keys=True, ensure_ascii=False) + "\n")


def load_predictions(path: str | Path) -> dict[str, list[ScoredCandidate]]:
    out: dict[str, list[ScoredCandidate]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ranked = [ScoredCandidate(Triplet(p["head"], p["relation"], p["tail"]), float(p["score"]))
                          for p in obj["predictions"]]
                out[str(obj["id"])] = ranked
            except (ValueError, KeyError, TypeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: bad prediction record ({exc})") from None
    return out

