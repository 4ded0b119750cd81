"""Synthetic zero-shot corpus and the train/evaluate benchmark over relation folds.

Each relation owns a distinct verb phrase. Contexts realize a (person, org)
pair around that verb in an active or passive frame, and the relation's
template embeds the same verb, so an unseen relation is reachable only by
matching the template's verb against the context.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

from .data import Dataset, Example, RelationSpec, Triplet, project, split_folds
from .decoding import DecodeConfig
from .evaluation import MetricReport, aggregate, eval_entity, eval_multi, eval_single, run_ablations
from .model import MicroBackend, ModelConfig, Seq2Seq
from .pipeline import PredictionConfig, build_pools, calibrate_multi_threshold, default_threshold_grid, predict_multi
from .relfilter import FilterConfig, HashedBowEmbedder, calibrate_delta
from .rng import SplitMix64, derive_seed
from .templates import validate_template
from .tokenizer import build_vocab, tokenize
from .train import TrainConfig, make_pairs, train

log = logging.getLogger(__name__)

VERBS = (
    "founded", "acquired", "sued", "advises", "audits",
    "sponsors", "joined", "owns", "manages", "insures",
    "supplies", "reviewed", "funds", "hosts", "rebranded",
    "invested in", "partnered with", "consulted for", "was fired from", "testified against",
)
FIRST = ("Alice", "Bruno", "Chiara", "Dmitri", "Elena", "Farid", "Greta", "Hiro", "Ines", "Jonas",
         "Kira", "Lars", "Maya", "Nikhil", "Olga", "Pavel", "Quinn", "Rosa", "Sven", "Tariq")
LAST = ("Abbott", "Brandt", "Castillo", "Dorsey", "Eklund", "Fischer", "Garza", "Holm", "Ivanov", "Jensen",
        "Kowalski", "Lindqvist", "Moreau", "Nakamura", "Okafor", "Petrov", "Quispe", "Rinaldi", "Sato", "Toivonen")
ORG_STEM = ("Acme", "Borealis", "Cobalt", "Dynamo", "Everest", "Fulcrum", "Granite", "Helix", "Ion", "Juniper",
            "Keystone", "Lumen", "Meridian", "Nimbus", "Orbit", "Pinnacle", "Quasar", "Redwood", "Summit", "Tundra")
ORG_KIND = ("Corp", "Labs", "Group", "Systems", "Bank", "Media", "Foods", "Motors", "Capital", "Energy")


@dataclass(frozen=True)
class SyntheticGrammar:
    n_relations: int = 20
    multi_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_relations <= len(VERBS):
            raise ValueError(f"n_relations must be in 2..{len(VERBS)}")
        if not 0.0 <= self.multi_fraction < 1.0:
            raise ValueError("multi_fraction must be in [0, 1)")

    def relation_id(self, i: int) -> str:
        return f"R{i:02d}"

    def relations(self) -> dict[str, RelationSpec]:
        out = {}
        for i in range(self.n_relations):
            rid, verb = self.relation_id(i), VERBS[i]
            pattern = f"<head> {verb} <tail> ." if i % 2 == 0 else f"<tail> , {verb} by <head> ."
            out[rid] = RelationSpec(rid, verb.replace(" ", "_"), f"someone {verb} something",
                                    (validate_template(pattern, rid),))
        return out


def _person(rng: SplitMix64) -> str:
    return f"{FIRST[rng.below(len(FIRST))]} {LAST[rng.below(len(LAST))]}"


def _org(rng: SplitMix64) -> str:
    return f"{ORG_STEM[rng.below(len(ORG_STEM))]} {ORG_KIND[rng.below(len(ORG_KIND))]}"


def _clause(head: str, verb: str, tail: str, passive: bool) -> str:
    return f"{tail} , {verb} by {head}" if passive else f"{head} {verb} {tail}"


def generate(grammar: SyntheticGrammar, n_per_relation: int = 50, seed: int | None = None) -> Dataset:
    """``n_per_relation`` single-triplet rows per relation plus enough two-relation
    rows to make up ``multi_fraction`` of the corpus. Deterministic in ``seed``."""
    if n_per_relation < 1:
        raise ValueError("n_per_relation must be >= 1")
    seed = grammar.seed if seed is None else seed
    rng = SplitMix64(derive_seed(seed, "synthetic"))
    rels = grammar.relations()
    ids = sorted(rels)
    examples = []
    for rid in ids:
        verb = rels[rid].name.replace("_", " ")
        for j in range(n_per_relation):
            h, t = _person(rng), _org(rng)
            ctx = _clause(h, verb, t, passive=rng.below(2) == 1) + " ."
            examples.append(Example(f"{rid}-s{j:03d}", ctx, (Triplet(h, rid, t),)))
    n_single = len(examples)
    n_multi = int(round(grammar.multi_fraction * n_single / (1.0 - grammar.multi_fraction)))
    for j in range(n_multi):
        a = rng.below(len(ids))
        b = (a + 1 + rng.below(len(ids) - 1)) % len(ids)
        h1, t1 = _person(rng), _org(rng)
        h2 = _person(rng)
        while h2 == h1:
            h2 = _person(rng)
        t2 = _org(rng)
        while t2 == t1:
            t2 = _org(rng)
        va, vb = (rels[ids[k]].name.replace("_", " ") for k in (a, b))
        ctx = (_clause(h1, va, t1, rng.below(2) == 1) + " and " + _clause(h2, vb, t2, rng.below(2) == 1) + " .")
        examples.append(Example(f"M-{j:04d}", ctx, (Triplet(h1, ids[a], t1), Triplet(h2, ids[b], t2))))
    return Dataset(tuple(examples), rels)


def reference_oracle(example: Example, relations: dict[str, RelationSpec]) -> list[Triplet]:
    """Read every (head, relation, tail) off the context by locating each verb
    phrase and taking the two-token entities next to it."""
    toks = tokenize(example.context)
    out = []
    for rid in sorted(relations):
        verb = tokenize(relations[rid].name.replace("_", " "))
        for i in range(len(toks) - len(verb) + 1):
            if toks[i:i + len(verb)] != verb:
                continue
            j = i + len(verb)
            if i >= 1 and toks[i - 1] == "," and toks[j:j + 1] == ["by"]:
                tail, head = toks[i - 3:i - 1], toks[j + 1:j + 3]
            else:
                head, tail = toks[i - 2:i], toks[j:j + 2]
            out.append(Triplet(" ".join(head), rid, " ".join(tail)))
    return out


# ------------------------------------------------------------------ benchmark

@dataclass(frozen=True)
class BenchmarkConfig:
    n_relations: int = 20
    n_per_relation: int = 50
    m: int = 5
    v: int = 5
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    heldout_fraction: float = 0.1
    model: dict = field(default_factory=lambda: {"d_model": 64, "heads": 4, "encoder_layers": 2,
                                                  "decoder_layers": 2, "ffn_dim": 128})
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_size=32, learning_rate=2e-3, warmup_ratio=0.1, epochs=40, weight_decay=0.01,
        template_word_dropout=0.5))
    decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(max_output_len=12))
    # wider than the embedder default: at 256 buckets verb tokens collide often enough to cost accuracy
    embed_dim: int = 1024
    delta_grid: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(20))
    ablations: bool = False


def _heldout_split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``fraction`` of the single-triplet rows of seen relations."""
    ids = sorted(e.id for e in ds.examples if e.is_single)
    SplitMix64(derive_seed(seed, "heldout")).shuffle(ids)
    held = set(ids[:int(round(fraction * len(ids)))])
    return (ds._subset(e for e in ds.examples if e.id not in held),
            ds._subset(e for e in ds.examples if e.id in held))


def majority_baseline(gold: Dataset) -> float:
    """Share of the most frequent relation among single-triplet gold rows."""
    counts: dict[str, int] = {}
    for ex in gold.examples:
        counts[ex.triplets[0].relation] = counts.get(ex.triplets[0].relation, 0) + 1
    return max(counts.values()) / len(gold.examples) if counts else 0.0


def _single_acc(pools, gold: Dataset, fcfg: FilterConfig) -> float:
    preds = {p.example_id: p.ranked(fcfg) for p in pools}
    return eval_single(gold, preds).accuracy


def run_fold(data: Dataset, cfg: BenchmarkConfig, seed: int) -> dict:
    t0 = time.perf_counter()
    fold = split_folds(data.relations, cfg.m, cfg.v, seed)
    seen, held = _heldout_split(project(data, fold.train, require_all=True), cfg.heldout_fraction, seed)
    val = project(data, fold.validation, require_all=True)
    test = project(data, fold.test, require_all=True)
    leaks = check_zero_leak(seen, [data.relations[r] for r in (*fold.validation, *fold.test)])
    if leaks:
        raise AssertionError(f"unseen verb phrases found in training rows: {leaks[:3]}")

    texts = [e.context for e in data.examples] + [t.pattern for r in data.relations.values() for t in r.templates]
    vocab = build_vocab(texts)
    model = Seq2Seq(ModelConfig(vocab_size=len(vocab), **cfg.model), seed=derive_seed(seed, "init"))
    _, curve = train(model, make_pairs(seen, vocab), replace(cfg.train, seed=seed))
    backend = MicroBackend(model, vocab)
    emb = HashedBowEmbedder(cfg.embed_dim)
    base = PredictionConfig(decode=cfg.decode)
    t_train = time.perf_counter() - t0

    # validation: pick delta on single rows, the multi threshold on multi rows
    val_single, val_multi = val.single(), val.multi()
    val_pools = build_pools(backend, emb, val, fold.validation, base)
    single_pools = [p for p in val_pools if p.example_id in {e.id for e in val_single.examples}]
    delta, _ = calibrate_delta(cfg.delta_grid, lambda d: _single_acc(single_pools, val_single, FilterConfig(d)))
    fcfg = FilterConfig(delta)
    threshold = default_threshold_grid()[0]
    if val_multi.examples:
        multi_ranked = {p.example_id: p.ranked(fcfg) for p in val_pools if p.example_id not in
                        {e.id for e in val_single.examples}}
        threshold, _ = calibrate_multi_threshold(multi_ranked, val_multi)

    test_pools = build_pools(backend, emb, test, fold.test, base)
    ranked = {p.example_id: p.ranked(fcfg) for p in test_pools}
    test_single, test_multi = test.single(), test.multi()
    single = eval_single(test_single, ranked)
    multi = eval_multi(test_multi, {e.id: predict_multi(ranked[e.id], threshold) for e in test_multi.examples})
    entity = eval_entity(test_single, backend, decode=cfg.decode)
    seen_pools = build_pools(backend, emb, held, fold.train, base)
    seen_acc = _single_acc(seen_pools, held, fcfg)

    row = {
        "seed": seed,
        "fold": fold.to_json(),
        "n_train_rows": len(seen.examples),
        "n_test_single": len(test_single.examples),
        "n_test_multi": len(test_multi.examples),
        "final_loss": float(curve[-1]),
        "delta": delta,
        "multi_threshold": threshold,
        "seen_heldout_accuracy": seen_acc,
        "unseen_single_accuracy": single.accuracy,
        "unseen_multi": {"precision": multi.precision, "recall": multi.recall, "f1": multi.f1},
        "unseen_entity_accuracy": entity.accuracy,
        "majority_baseline": majority_baseline(test_single),
        "train_seconds": t_train,
    }
    if cfg.ablations:
        rows = run_ablations(test, backend, emb, replace(base, filter=fcfg), fold.test)
        row["ablations"] = [{k: v for k, v in r.items() if k != "top_scores"} for r in rows]
    row["seconds"] = time.perf_counter() - t0
    log.info("seed %d: seen %.3f unseen %.3f entity %.3f (baseline %.3f) in %.1fs", seed, seen_acc,
             single.accuracy, entity.accuracy, row["majority_baseline"], row["seconds"])
    return row


def check_zero_leak(train_rows: Dataset, unseen: Sequence[RelationSpec]) -> list[tuple[str, str]]:
    """(example id, verb) pairs where an unseen relation's verb phrase shows up in training text."""
    hits = []
    for ex in train_rows.examples:
        toks = tokenize(ex.context)
        for rel in unseen:
            verb = tokenize(rel.name.replace("_", " "))
            if any(toks[i:i + len(verb)] == verb for i in range(len(toks) - len(verb) + 1)):
                hits.append((ex.id, rel.name))
    return hits


def benchmark(cfg: BenchmarkConfig, data: Dataset | None = None) -> dict:
    """Train and evaluate one model per seed; returns a JSON-ready manifest."""
    t0 = time.perf_counter()
    if data is None:
        data = generate(SyntheticGrammar(cfg.n_relations), cfg.n_per_relation, seed=0)
    rows = [run_fold(data, cfg, s) for s in cfg.seeds]

    def agg(key, mode="single"):
        return aggregate(mode, [MetricReport(mode, accuracy=r[key]) for r in rows]).to_json()

    summary = {
        "seen_heldout_accuracy": agg("seen_heldout_accuracy"),
        "unseen_single_accuracy": agg("unseen_single_accuracy"),
        "unseen_entity_accuracy": agg("unseen_entity_accuracy", "entity"),
        "majority_baseline": agg("majority_baseline"),
        "unseen_multi_f1": aggregate("multi", [MetricReport("multi", **r["unseen_multi"]) for r in rows]).to_json(),
    }
    return {
        "config": {
            "n_relations": cfg.n_relations, "n_per_relation": cfg.n_per_relation, "m": cfg.m, "v": cfg.v,
            "seeds": list(cfg.seeds), "model": cfg.model, "embed_dim": cfg.embed_dim, "train": cfg.train.to_json(),
            "decode": {k: getattr(cfg.decode, k) for k in ("beam_size", "max_candidates_per_relation",
                                                           "max_output_len", "vocab_constraint", "greedy")},
        },
        "folds": rows,
        "summary": summary,
        "seconds": time.perf_counter() - t0,
    }
