import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zett.data import (
    Dataset,
    FoldSpec,
    Triplet,
    find_span,
    load_dataset,
    load_relations,
    project,
    save_dataset,
    save_relations,
    split_folds,
)
from zett.errors import DataError


def test_triplet_key_normalizes_entities():
    assert Triplet("Ada  Lovelace", "P1", "Acme, Inc.").key() == ("Ada Lovelace", "P1", "Acme , Inc .")
    assert Triplet("ada", "P1", "x").key() != Triplet("Ada", "P1", "x").key()
    with pytest.raises(DataError):
        Triplet("  ", "P1", "x")


def test_find_span():
    assert find_span(["a", "b", "c", "b", "c"], ["b", "c"]) == 1
    assert find_span(["a", "b", "c", "b", "c"], ["b", "c"], 2) == 3
    assert find_span(["a"], ["z"]) == -1
    assert find_span(["a"], []) == -1


@pytest.mark.parametrize("n,m,v,n_train", [(80, 5, 5, 70), (113, 15, 5, 93), (80, 10, 5, 65)])
def test_split_arithmetic(n, m, v, n_train):
    fold = split_folds([f"P{i}" for i in range(n)], m, v, seed=0)
    assert (len(fold.train), len(fold.validation), len(fold.test)) == (n_train, v, m)


@settings(max_examples=50, deadline=None)
@given(st.integers(12, 120), st.sampled_from([5, 10, 15]), st.integers(0, 4))
def test_split_disjoint_and_covering(n, m, seed):
    ids = [f"R{i:03d}" for i in range(n)]
    if m + 5 >= n:
        with pytest.raises(DataError):
            split_folds(ids, m, 5, seed)
        return
    fold = split_folds(ids, m, 5, seed)
    parts = [set(fold.train), set(fold.validation), set(fold.test)]
    assert sum(map(len, parts)) == n and set().union(*parts) == set(ids)
    assert split_folds(list(reversed(ids)), m, 5, seed) == fold  # input order irrelevant


def test_split_seed_changes_partition():
    ids = [f"R{i}" for i in range(40)]
    assert split_folds(ids, 5, 5, 0).test != split_folds(ids, 5, 5, 1).test


def test_foldspec_roundtrip_and_overlap(tmp_path):
    fold = split_folds([f"R{i}" for i in range(20)], 5, 5, 3)
    fold.save(tmp_path / "f.json")
    assert FoldSpec.load(tmp_path / "f.json") == fold
    bad = fold.to_json()
    bad["train"] = bad["train"] + [bad["test"][0]]
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    with pytest.raises(DataError, match="overlap"):
        FoldSpec.load(tmp_path / "bad.json")


def test_dataset_roundtrip(tmp_path, toy_dataset):
    save_relations(toy_dataset.relations, tmp_path / "rel.json")
    save_dataset(toy_dataset, tmp_path / "d.jsonl")
    ds = load_dataset(tmp_path / "d.jsonl", tmp_path / "rel.json")
    assert ds.examples == toy_dataset.examples
    assert load_relations(tmp_path / "rel.json") == dict(toy_dataset.relations)
    assert not ds.flags


def test_load_dataset_errors(tmp_path, toy_relations):
    save_relations(toy_relations, tmp_path / "rel.json")
    rows = {
        "unknown relation": {"id": "x", "text": "a b", "triplets": [{"head": "a", "relation": "P9", "tail": "b"}]},
        "malformed": {"id": "x", "triplets": []},
    }
    for msg, row in rows.items():
        (tmp_path / "d.jsonl").write_text(json.dumps(row) + "\n")
        with pytest.raises(DataError, match=msg):
            load_dataset(tmp_path / "d.jsonl", tmp_path / "rel.json")
    (tmp_path / "d.jsonl").write_text('{"id": "a", "text": "t"}\n{"id": "a", "text": "u"}\n')
    with pytest.raises(DataError, match=":2: duplicate"):
        load_dataset(tmp_path / "d.jsonl", tmp_path / "rel.json")


def test_missing_entities_are_flagged(tmp_path, toy_relations):
    save_relations(toy_relations, tmp_path / "rel.json")
    row = {"id": "q", "text": "Nobody here .", "triplets": [{"head": "Ada", "relation": "P1", "tail": "Acme"}]}
    (tmp_path / "d.jsonl").write_text(json.dumps(row) + "\n")
    ds = load_dataset(tmp_path / "d.jsonl", tmp_path / "rel.json")
    assert len(ds) == 1 and "q" in ds.flags
    assert len(ds.strict()) == 0


def test_project(toy_dataset):
    p1 = project(toy_dataset, ["P1"])
    assert [e.id for e in p1.examples] == ["a", "c"]
    assert p1.examples[1].triplets == (Triplet("Alan Turing", "P1", "Bletchley"),)
    assert [e.id for e in project(toy_dataset, ["P1"], require_all=True).examples] == ["a"]
    with pytest.raises(DataError):
        project(toy_dataset, ["P7"])


def test_single_multi_views(toy_dataset):
    assert [e.id for e in toy_dataset.single().examples] == ["a", "b"]
    assert [e.id for e in toy_dataset.multi().examples] == ["c"]


def test_unknown_relation_rejected(toy_dataset):
    with pytest.raises(DataError):
        Dataset(toy_dataset.examples, {})
