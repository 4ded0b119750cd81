import csv
import json
import subprocess
import sys

import pytest

from zett.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

TINY = ["--d-model", "16", "--heads", "2", "--encoder-layers", "1", "--decoder-layers", "1", "--ffn-dim", "32",
        "--batch-size", "16", "--lr", "5e-3", "--max-steps", "15"]
DECODE = ["--beam", "2", "--max-candidates", "2", "--max-output-len", "10"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synthetic", "generate", "--n-relations", "14", "--n-per-relation", "6", "--out", str(d)]) == 0
    data, rels = str(d / "data.jsonl"), str(d / "relations.json")
    assert main(["split", "--relations", rels, "--m", "5", "--v", "5", "--seed", "1", "--out", str(d / "fold.json")]) == 0
    assert main(["train", "--data", data, "--relations", rels, "--fold", str(d / "fold.json"), *TINY,
                 "--out", str(d / "model" / "m.ckpt")]) == 0
    return d


def _io(work):
    return ["--data", str(work / "data.jsonl"), "--relations", str(work / "relations.json")]


def _model(work):
    return ["--ckpt", str(work / "model" / "m.ckpt"), "--fold", str(work / "fold.json")]


def test_train_writes_artifacts(work):
    assert (work / "model" / "m.ckpt.vocab.json").exists()
    manifest = json.loads((work / "model" / "manifest.json").read_text())
    resolved = json.loads((work / "model" / "resolved_config.json").read_text())
    assert resolved["model.d_model"] == 16 and resolved["train.max_steps"] == 15
    assert any(v for v in manifest["inputs"].values())


def test_extract_is_byte_reproducible(work):
    outs = []
    for name in ("p1.jsonl", "p2.jsonl"):
        assert main(["extract", *_io(work), *_model(work), *DECODE, "--delta", "0.1", "--out", str(work / name)]) == 0
        outs.append((work / name).read_bytes())
    assert outs[0] == outs[1] and outs[0]


def test_eval_modes(work):
    pred = str(work / "p1.jsonl")
    if not (work / "p1.jsonl").exists():
        main(["extract", *_io(work), *_model(work), *DECODE, "--out", pred])
    assert main(["eval", *_io(work), "--pred", pred, "--mode", "multi", "--out", str(work / "m.json")]) == 0
    rep = json.loads((work / "m.json").read_text())
    assert {"precision", "recall", "f1"} <= set(rep)
    assert main(["eval", *_io(work), "--pred", pred, "--mode", "single", "--out", str(work / "s.json")]) == 0
    assert 0 <= json.loads((work / "s.json").read_text())["accuracy"] <= 1
    assert main(["eval", *_io(work), "--ckpt", str(work / "model" / "m.ckpt"), "--mode", "entity",
                 "--max-output-len", "10", "--beam", "4", "--out", str(work / "e.json")]) == 0
    assert json.loads((work / "e.json").read_text())["mode"] == "entity"


def test_calibrate_and_ablate(work):
    args = [*_io(work), *_model(work), *DECODE, "--split", "validation"]
    assert main(["calibrate", "delta", *args, "--grid", "0.0", "0.5", "--out", str(work / "d.json")]) == 0
    assert json.loads((work / "d.json").read_text())["best"] in (0.0, 0.5)
    assert main(["calibrate", "multi-threshold", *args, "--out", str(work / "t.json")]) == 0
    res = json.loads((work / "t.json").read_text())
    assert len(res["scan"]) == 16
    assert main(["ablate", *_io(work), *_model(work), "--max-output-len", "10", "--no-filter",
                 "--out", str(work / "a.json")]) == 0
    rows = json.loads((work / "a.json").read_text())["rows"]
    assert [r["config"] for r in rows] == ["full", "no-filter"]


def test_templates_commands(work):
    fold = json.loads((work / "fold.json").read_text())
    rid = fold["train"][0]
    assert main(["templates", "mine", *_io(work), "--relation", rid, "--out", str(work / "mined.json")]) == 0
    mined = json.loads((work / "mined.json").read_text())
    assert mined and mined[0]["source"] == "mined"
    (work / "cands.json").write_text(json.dumps({rid: ["<head> a <tail>", "<head> a <tail>", "<head> b <tail>"]}))
    assert main(["templates", "paraphrase-select", "--candidates", str(work / "cands.json"),
                 "--out", str(work / "chosen.json")]) == 0
    assert json.loads((work / "chosen.json").read_text()) == {rid: ["<head> a <tail>"]}
    assert main(["templates", "autogen", *_io(work), "--ckpt", str(work / "model" / "m.ckpt"), "--relation", rid,
                 "--n", "2", "--beam", "2", "--k", "1", "--out", str(work / "auto.json")]) == 0


def test_humaneval_commands(work):
    pred = work / "p1.jsonl"
    if not pred.exists():
        main(["extract", *_io(work), *_model(work), *DECODE, "--out", str(pred)])
    ann = work / "ann.csv"
    assert main(["humaneval", "export", "--pred", str(pred), "--k", "2", "--n", "5", "--out", str(ann)]) == 0
    rows = list(csv.DictReader(ann.open()))
    assert 0 < len(rows) <= 10
    for r in rows:
        r["annotator1"], r["annotator2"] = "true", "false"
    with ann.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    assert main(["humaneval", "kappa", "--annotations", str(ann), "--out", str(work / "k.json")]) == 0
    assert json.loads((work / "k.json").read_text())["kappa"] == 0.0  # no agreement beyond chance
    assert main(["humaneval", "rescore", *_io(work), "--pred", str(pred), "--annotations", str(ann),
                 "--out", str(work / "r.json")]) == 0


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["extract", "--data", "x"],
    ["calibrate", "sideways"],
    ["extract", "--data", "d", "--relations", "r", "--ckpt", "c", "--greedy", "--beam", "3", "--out", "o"],
    ["split", "--relations", "r", "--m", "5"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == EXIT_USAGE


def test_data_errors_exit_2(tmp_path, work, capsys):
    assert main(["split", "--relations", str(tmp_path / "missing.json"), "--m", "1", "--out",
                 str(tmp_path / "f.json")]) == EXIT_DATA
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    assert main(["eval", "--data", str(tmp_path / "bad.jsonl"), "--relations", str(work / "relations.json"),
                 "--pred", str(tmp_path / "bad.jsonl"), "--out", str(tmp_path / "x.json")]) == EXIT_DATA
    assert "bad.jsonl:1" in capsys.readouterr().err
    assert main(["split", "--relations", str(work / "relations.json"), "--m", "10", "--v", "10",
                 "--out", str(tmp_path / "f.json")]) == EXIT_DATA


def test_config_file_precedence(tmp_path, work):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 3}))
    out1, out2 = tmp_path / "f1.json", tmp_path / "f2.json"
    rels = str(work / "relations.json")
    assert main(["split", "--relations", rels, "--m", "5", "--config", str(tmp_path / "c.json"),
                 "--out", str(out1)]) == 0
    assert json.loads(out1.read_text())["seed"] == 3
    assert main(["split", "--relations", rels, "--m", "5", "--config", str(tmp_path / "c.json"), "--seed", "4",
                 "--out", str(out2)]) == 0
    assert json.loads(out2.read_text())["seed"] == 4
    (tmp_path / "bad.json").write_text(json.dumps({"nope": 1}))
    assert main(["split", "--relations", rels, "--m", "5", "--config", str(tmp_path / "bad.json"),
                 "--out", str(out2)]) == EXIT_USAGE


def test_module_entry_point_exit_codes():
    run = lambda *a: subprocess.run([sys.executable, "-m", "zett", *a], capture_output=True, text=True)  # noqa: E731
    assert run("--help").returncode == EXIT_OK
    assert run("split").returncode == EXIT_USAGE
    assert run("split", "--relations", "/nonexistent.json", "--m", "1", "--out", "/tmp/zz.json").returncode == EXIT_DATA
