import random

import pytest
from oracles import TableBackend, make_vocab, prf_by_sets

from zett.data import Dataset, Example, RelationSpec, Triplet
from zett.decoding import DecodeConfig, ScoredCandidate
from zett.errors import DataError
from zett.evaluation import eval_multi
from zett.pipeline import (
    PAPER_THRESHOLDS,
    PredictionConfig,
    build_pools,
    calibrate_multi_threshold,
    default_threshold_grid,
    extract,
    load_predictions,
    predict_dataset,
    predict_multi,
    predict_single,
    save_predictions,
)
from zett.relfilter import FilterConfig, HashedBowEmbedder
from zett.templates import validate_template

DECODE = DecodeConfig(beam_size=4, max_candidates_per_relation=4, max_output_len=8)


@pytest.fixture
def backend(toy_dataset):
    words = {w for e in toy_dataset.examples for w in e.context.split()}
    return TableBackend(make_vocab(sorted(words) + ["employs", "works", "for"]), seed=1)


def cand(h, r, t, s):
    return ScoredCandidate(Triplet(h, r, t), s)


def test_threshold_grid_convention():
    grid = default_threshold_grid()
    assert grid[0] == -3.5 and grid[-1] == -2.0 and len(grid) == 16
    assert all(abs(b - a - 0.1) < 1e-9 for a, b in zip(grid, grid[1:]))
    assert set(PAPER_THRESHOLDS) <= set(grid)


def test_prediction_config_validation():
    with pytest.raises(ValueError):
        PredictionConfig(mode="multi")
    with pytest.raises(ValueError):
        PredictionConfig(mode="other")
    with pytest.raises(ValueError):
        PredictionConfig(multi_template_policy="mean")


def test_predict_single_and_multi():
    ranked = [cand("a", "R", "b", -1.0), cand("c", "R", "d", -2.5), cand("e", "R", "f", -3.0)]
    assert predict_single(ranked) == Triplet("a", "R", "b")
    assert predict_single([]) is None
    assert predict_multi(ranked, -2.5) == [Triplet("a", "R", "b")]  # strictly greater
    assert len(predict_multi(ranked, -3.5)) == 3


def test_extract_sorted_deduplicated_and_thread_independent(backend, toy_dataset):
    rels = list(toy_dataset.relations.values())
    cfg = PredictionConfig(decode=DECODE, filter=FilterConfig(-1.0))
    emb = HashedBowEmbedder()
    for ex in toy_dataset.examples:
        one = extract(backend, emb, ex.context, rels, cfg, threads=1)
        many = extract(backend, emb, ex.context, rels, cfg, threads=4)
        assert one == many
        assert [c.sort_key() for c in one] == sorted(c.sort_key() for c in one)
        assert len({c.triplet.key() for c in one}) == len(one)
        assert {c.triplet.relation for c in one} <= {"P1", "P2"}


def test_max_over_templates_dominates_first(backend, toy_dataset):
    rels = [toy_dataset.relations["P2"]]
    emb = HashedBowEmbedder()
    ctx = toy_dataset.examples[1].context
    first = extract(backend, emb, ctx, rels, PredictionConfig(decode=DECODE, filter=FilterConfig(-1.0)))
    best = extract(backend, emb, ctx, rels, PredictionConfig(decode=DECODE, filter=FilterConfig(-1.0),
                                                             multi_template_policy="max-over-templates"))
    scores = {c.triplet.key(): c.score for c in best}
    assert all(scores.get(c.triplet.key(), -1e9) >= c.score for c in first)
    assert {c.template_used for c in best} <= {t.pattern for t in rels[0].templates}


def test_pools_agree_with_extract(backend, toy_dataset):
    emb = HashedBowEmbedder()
    for delta in (-1.0, 0.2, 0.9):
        cfg = PredictionConfig(decode=DECODE, filter=FilterConfig(delta))
        direct = predict_dataset(backend, emb, toy_dataset, ["P1", "P2"], cfg)
        pools = build_pools(backend, emb, toy_dataset, ["P1", "P2"], cfg)
        assert {p.example_id: p.ranked(cfg.filter) for p in pools} == direct
    with pytest.raises(DataError):
        predict_dataset(backend, emb, toy_dataset, [], cfg)


def _random_multi_case(seed):
    rng = random.Random(seed)
    rels = {}
    for r in ("A", "B"):
        rels[r] = RelationSpec(r, r, "d", (validate_template("<head> x <tail>", r),))
    ents = ["e1", "e2", "e3"]
    examples, ranked = [], {}
    for i in range(6):
        pool = [Triplet(h, r, t) for h in ents for r in rels for t in ents if h != t]
        gold = tuple(rng.sample(pool, rng.randint(1, 3)))
        examples.append(Example(f"x{i}", "e1 e2 e3", gold))
        cands = rng.sample(pool, 5)
        ranked[f"x{i}"] = sorted((ScoredCandidate(t, round(rng.uniform(-4, -1.5), 2)) for t in cands),
                                 key=ScoredCandidate.sort_key)
    return Dataset(tuple(examples), rels), ranked


@pytest.mark.parametrize("seed", range(20))
def test_threshold_calibration_attains_exhaustive_max(seed):
    gold, ranked = _random_multi_case(seed)
    best, scan = calibrate_multi_threshold(ranked, gold)
    gold_sets = {e.id: {t.key() for t in e.triplets} for e in gold.examples}
    rescan = {}
    for th in default_threshold_grid():
        preds = {eid: {c.triplet.key() for c in r if c.score > th} for eid, r in ranked.items()}
        rescan[th] = prf_by_sets(gold_sets, preds)[2]
    assert scan == pytest.approx(rescan, abs=0)
    top = max(rescan.values())
    assert rescan[best] == top and best == min(t for t, f in rescan.items() if f == top)
    assert eval_multi(gold, {e: predict_multi(r, best) for e, r in ranked.items()}).f1 == top


def test_predictions_roundtrip(tmp_path):
    preds = {"b": [cand("x y", "R", "z", -1.25)], "a": []}
    save_predictions(preds, tmp_path / "p.jsonl")
    back = load_predictions(tmp_path / "p.jsonl")
    assert list(back) == ["b", "a"]
    assert back["b"][0].triplet == Triplet("x y", "R", "z") and back["b"][0].score == -1.25
    save_predictions(back, tmp_path / "q.jsonl")
    assert (tmp_path / "p.jsonl").read_bytes() == (tmp_path / "q.jsonl").read_bytes()


def test_load_predictions_names_bad_line(tmp_path):
    (tmp_path / "p.jsonl").write_text('{"id": "a", "predictions": []}\n{"id": "b"}\n')
    with pytest.raises(DataError, match=":2:"):
        load_predictions(tmp_path / "p.jsonl")
