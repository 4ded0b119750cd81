"""Command-line entry point: ``zett <verb> [...]`` (or ``python -m zett``).

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import checkpoint
from .data import Dataset, FoldSpec, load_dataset, load_relations, project, save_dataset, save_relations, split_folds
from .decoding import DecodeConfig
from .errors import ZettError
from .evaluation import (
    ablation_configs,
    cohen_kappa,
    eval_entity,
    eval_multi,
    eval_single,
    export_human_eval,
    read_annotations,
    rescore_with_annotations,
    run_ablations,
    write_annotations,
)
from .model import MicroBackend, ModelConfig, Seq2Seq
from .pipeline import (
    PredictionConfig,
    build_pools,
    calibrate_multi_threshold,
    default_threshold_grid,
    load_predictions,
    predict_dataset,
    save_predictions,
)
from .relfilter import FilterConfig, HashedBowEmbedder, PrecomputedEmbedder, calibrate_delta
from .rng import derive_seed
from .templategen import autogen_templates, mine_templates, select_paraphrase
from .templates import save_template_sets
from .tokenizer import Vocabulary, build_vocab
from .train import TrainConfig, make_pairs, train

log = logging.getLogger("zett")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ------------------------------------------------------------------ config

DEFAULTS = {
    "model.d_model": 64, "model.heads": 4, "model.encoder_layers": 2, "model.decoder_layers": 2,
    "model.ffn_dim": 128, "model.max_input_len": 128, "model.max_output_len": 64, "model.dropout": 0.0,
    "train.batch_size": 64, "train.learning_rate": 3e-5, "train.warmup_ratio": 0.2, "train.epochs": 3,
    "train.weight_decay": 0.01, "train.max_grad_norm": 1.0, "train.max_steps": 0,
    "train.template_word_dropout": 0.0,
    "decode.beam_size": 4, "decode.max_candidates_per_relation": 4, "decode.max_output_len": 64,
    "decode.vocab_constraint": True, "decode.greedy": False,
    "filter.delta": 0.85, "filter.fallback_top1": True,
    "predict.mode": "single", "predict.multi_threshold": None, "predict.multi_template_policy": "first",
    "seed": 0, "threads": 1,
}

# flag dest -> dotted config key
FLAG_KEYS = {
    "d_model": "model.d_model", "heads": "model.heads", "encoder_layers": "model.encoder_layers",
    "decoder_layers": "model.decoder_layers", "ffn_dim": "model.ffn_dim", "dropout": "model.dropout",
    "batch_size": "train.batch_size", "lr": "train.learning_rate", "warmup_ratio": "train.warmup_ratio",
    "epochs": "train.epochs", "weight_decay": "train.weight_decay", "max_steps": "train.max_steps",
    "template_word_dropout": "train.template_word_dropout",
    "beam": "decode.beam_size", "max_candidates": "decode.max_candidates_per_relation",
    "max_output_len": "decode.max_output_len", "vocab_constraint": "decode.vocab_constraint",
    "greedy": "decode.greedy", "delta": "filter.delta", "fallback": "filter.fallback_top1",
    "mode": "predict.mode", "threshold": "predict.multi_threshold", "policy": "predict.multi_template_policy",
    "seed": "seed", "threads": "threads",
}


def resolve_config(args) -> dict:
    """Defaults, then the JSON config file (flat dotted keys), then explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ZettError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            cfg[key] = val
    if cfg["threads"] in (None, 1) and os.environ.get("ZETT_THREADS") and getattr(args, "threads", None) is None:
        cfg["threads"] = int(os.environ["ZETT_THREADS"])
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def model_config(cfg, vocab_size) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, **_section(cfg, "model"))


def train_config(cfg) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **_section(cfg, "train"))


def prediction_config(cfg) -> PredictionConfig:
    p = _section(cfg, "predict")
    return PredictionConfig(mode=p["mode"], multi_threshold=p["multi_threshold"],
                            decode=DecodeConfig(**_section(cfg, "decode")),
                            filter=FilterConfig(**_section(cfg, "filter")),
                            multi_template_policy=p["multi_template_policy"])


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_record(args, cfg: dict, inputs: list) -> None:
    """``resolved_config.json`` plus ``manifest.json`` (sha256 of each input) in the run dir."""
    run_dir = Path(args.run_dir) if getattr(args, "run_dir", None) else (
        Path(args.out).parent if getattr(args, "out", None) else Path("."))
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved_config.json").write_text(
        json.dumps({"command": args.command_path, **cfg}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest = {str(p): file_digest(p) for p in inputs if p and Path(p).is_file()}
    (run_dir / "manifest.json").write_text(json.dumps({"inputs": manifest}, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")


# ------------------------------------------------------------------ helpers

def _vocab_path(ckpt) -> Path:
    return Path(str(ckpt) + ".vocab.json")


def _load_backend(ckpt) -> MicroBackend:
    vocab = Vocabulary.load(_vocab_path(ckpt))
    return MicroBackend(checkpoint.load(ckpt, vocab), vocab)


def _embedder(args):
    base = HashedBowEmbedder()
    if getattr(args, "embeddings", None):
        return PrecomputedEmbedder.load(args.embeddings, fallback=base)
    return base


def _load_data(args) -> Dataset:
    return load_dataset(args.data, args.relations)


def _candidate_relations(args, ds: Dataset) -> list[str]:
    if getattr(args, "fold", None):
        fold = FoldSpec.load(args.fold)
        return list(getattr(fold, args.split))
    return sorted(ds.relations)


def _finite(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _dump(obj, out):
    text = json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------ commands

def cmd_split(args, cfg):
    rels = load_relations(args.relations)
    fold = split_folds(rels, args.m, args.v, cfg["seed"])
    fold.save(args.out)
    write_run_record(args, cfg, [args.relations])


def cmd_train(args, cfg):
    ds = _load_data(args)
    if args.fold:
        ds = project(ds, FoldSpec.load(args.fold).train, require_all=True)
    vocab_texts = [e.context for e in ds.examples]
    vocab_texts += [t.pattern for r in ds.relations.values() for t in r.templates]
    for extra in args.vocab_from or []:
        vocab_texts += [e.context for e in load_dataset(extra, args.relations).examples]
    vocab = build_vocab(vocab_texts, args.min_count)
    model = Seq2Seq(model_config(cfg, len(vocab)), seed=derive_seed(cfg["seed"], "init"))
    _, curve = train(model, make_pairs(ds, vocab), train_config(cfg))
    checkpoint.save(model, args.out, vocab)
    vocab.save(_vocab_path(args.out))
    write_run_record(args, cfg, [args.data, args.relations, args.fold, *(args.vocab_from or [])])
    log.info("final loss %.4f after %d steps", curve[-1], len(curve))


def cmd_extract(args, cfg):
    ds = _load_data(args)
    pcfg = prediction_config(cfg)
    preds = predict_dataset(_load_backend(args.ckpt), _embedder(args), ds, _candidate_relations(args, ds),
                            pcfg, cfg["threads"])
    if pcfg.mode == "multi":
        preds = {k: [c for c in v if c.score > pcfg.multi_threshold] for k, v in preds.items()}
    save_predictions(preds, args.out)
    write_run_record(args, cfg, [args.ckpt, args.data, args.relations, args.fold])


def cmd_eval(args, cfg):
    ds = _load_data(args)
    mode = cfg["predict.mode"] if args.mode is None else args.mode
    if mode == "entity":
        if not args.ckpt:
            raise UsageError("eval --mode entity needs --ckpt")
        # the entity mode is not a prediction mode; only the decode settings apply
        decode = prediction_config({**cfg, "predict.mode": "single"}).decode
        rep = eval_entity(ds.single(), _load_backend(args.ckpt), decode=decode)
    else:
        if not args.pred:
            raise UsageError(f"eval --mode {mode} needs --pred")
        preds = load_predictions(args.pred)
        rep = eval_single(ds.single(), preds) if mode == "single" else eval_multi(ds.multi() if args.multi_only else ds,
                                                                                  preds, macro=args.macro)
    _dump(rep.to_json(), args.out)


def cmd_calibrate(args, cfg):
    ds = _load_data(args)
    backend, emb = _load_backend(args.ckpt), _embedder(args)
    pcfg = prediction_config(cfg)
    rel_ids = _candidate_relations(args, ds)
    if args.target == "delta":
        gold = ds.single()
        pools = build_pools(backend, emb, gold, rel_ids, pcfg, cfg["threads"])
        grid = args.grid or [round(0.05 * i, 2) for i in range(20)]
        best, scan = calibrate_delta(grid, lambda d: eval_single(
            gold, {p.example_id: p.ranked(replace(pcfg.filter, delta=d)) for p in pools}).accuracy)
    else:
        gold = ds.multi() if ds.multi().examples else ds
        pools = build_pools(backend, emb, gold, rel_ids, pcfg, cfg["threads"])
        best, scan = calibrate_multi_threshold({p.example_id: p.ranked(pcfg.filter) for p in pools}, gold,
                                               args.grid or default_threshold_grid())
    _dump({"best": best, "scan": {str(k): v for k, v in scan.items()}}, args.out)
    write_run_record(args, cfg, [args.ckpt, args.data, args.relations, args.fold])


def cmd_ablate(args, cfg):
    ds = _load_data(args)
    base = prediction_config(cfg)
    toggles = [n for n, on in (("no-vocab-constraint", args.no_vocab_constraint_ablation),
                               ("greedy", args.greedy_ablation), ("no-filter", args.no_filter)) if on]
    rows = run_ablations(ds, _load_backend(args.ckpt), _embedder(args), base, _candidate_relations(args, ds),
                         cfg["threads"])
    keep = {"full", *toggles} if toggles else set(ablation_configs(base))
    rows = [{k: v for k, v in r.items() if k != "top_scores"} for r in rows if r["config"] in keep]
    _dump({"rows": rows}, args.out)
    write_run_record(args, cfg, [args.ckpt, args.data, args.relations, args.fold])


def cmd_templates(args, cfg):
    if args.action == "mine":
        ds = _load_data(args)
        cands = mine_templates(ds, args.relation, args.k)
        _dump([asdict(c) for c in cands], args.out)
    elif args.action == "paraphrase-select":
        sets = json.loads(Path(args.candidates).read_text(encoding="utf-8"))
        chosen = {rid: [select_paraphrase(pats, args.policy, cfg["seed"])] for rid, pats in sets.items()}
        if args.out:
            save_template_sets(chosen, args.out)
        else:
            _dump(chosen, None)
    else:
        ds = _load_data(args)
        backend = _load_backend(args.ckpt)
        labeled = ds._subset([e for e in ds.examples if args.relation in e.relations()][:args.n])
        cands = autogen_templates(backend, labeled, args.relation, beam=args.beam, top_k=args.k)
        _dump([asdict(c) for c in cands], args.out)


def cmd_humaneval(args, cfg):
    if args.action == "export":
        preds = load_predictions(args.pred)
        records, short = export_human_eval(preds, args.k, args.n, cfg["seed"])
        write_annotations(records, args.out)
        if short:
            log.warning("contexts with fewer than %d predictions: %s", args.k, ", ".join(short[:10]))
    elif args.action == "kappa":
        _dump({"kappa": cohen_kappa(read_annotations(args.annotations))}, args.out)
    else:
        ds = _load_data(args)
        rep = rescore_with_annotations(ds, load_predictions(args.pred), read_annotations(args.annotations))
        _dump(rep.to_json(), args.out)


def cmd_synthetic(args, cfg):
    from .synthetic import BenchmarkConfig, SyntheticGrammar, benchmark, generate

    if args.action == "generate":
        grammar = SyntheticGrammar(args.n_relations, args.multi_fraction)
        ds = generate(grammar, args.n_per_relation, cfg["seed"])
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, out / "data.jsonl")
        save_relations(ds.relations, out / "relations.json")
    else:
        bcfg = BenchmarkConfig(n_relations=args.n_relations, n_per_relation=args.n_per_relation,
                               m=args.m, v=args.v, seeds=tuple(args.seeds), ablations=args.ablations)
        if args.epochs:
            bcfg = replace(bcfg, train=replace(bcfg.train, epochs=args.epochs))
        _dump(benchmark(bcfg), args.out)


# ------------------------------------------------------------------ parser

def _common(p, data=True, ckpt=False):
    p.add_argument("--config", help="JSON file of flat dotted keys, e.g. {\"decode.beam_size\": 8}")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker cap (default: $ZETT_THREADS or 1)")
    p.add_argument("--run-dir", help="where resolved_config.json and manifest.json go")
    p.add_argument("--out")
    if data:
        p.add_argument("--data", required=True)
        p.add_argument("--relations", required=True, help="relation registry JSON")
    if ckpt:
        p.add_argument("--ckpt", required=True)


def _decode_flags(p, toggles=True):
    p.add_argument("--beam", type=int)
    if toggles:
        p.add_argument("--greedy", action="store_const", const=True)
        p.add_argument("--no-vocab-constraint", dest="vocab_constraint", action="store_const", const=False)
    p.add_argument("--max-candidates", type=int)
    p.add_argument("--max-output-len", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--no-fallback", dest="fallback", action="store_const", const=False)
    p.add_argument("--policy", choices=("first", "max-over-templates"))
    p.add_argument("--embeddings", help="precomputed embedding JSON (sha256(text) -> vector)")
    p.add_argument("--fold")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test",
                   help="which fold relations are the candidates")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="zett", description="Zero-shot triplet extraction by template infilling.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("split", help="partition relations into train/validation/test folds")
    _common(p, data=False)
    p.add_argument("--relations", required=True)
    p.add_argument("--m", type=int, required=True, help="number of unseen (test) relations")
    p.add_argument("--v", type=int, default=5, help="number of validation relations")
    p.set_defaults(func=cmd_split, need_out=True)

    p = sub.add_parser("train", help="fine-tune a micro model on the training relations")
    _common(p)
    p.add_argument("--fold", help="restrict training to the fold's train relations")
    p.add_argument("--vocab-from", nargs="*", help="extra JSONL files whose text joins the vocabulary")
    p.add_argument("--min-count", type=int, default=1)
    for flag, typ in (("--d-model", int), ("--heads", int), ("--encoder-layers", int), ("--decoder-layers", int),
                      ("--ffn-dim", int), ("--dropout", float), ("--batch-size", int), ("--lr", float),
                      ("--warmup-ratio", float), ("--epochs", int), ("--weight-decay", float),
                      ("--max-steps", int), ("--template-word-dropout", float)):
        p.add_argument(flag, type=typ)
    p.set_defaults(func=cmd_train, need_out=True)

    p = sub.add_parser("extract", help="rank triplets for every example")
    _common(p, ckpt=True)
    _decode_flags(p)
    p.add_argument("--mode", choices=("single", "multi"))
    p.add_argument("--threshold", type=float, help="multi mode: keep scores above this log-probability")
    p.set_defaults(func=cmd_extract, need_out=True)

    p = sub.add_parser("eval", help="score predictions against gold")
    _common(p)
    p.add_argument("--pred")
    p.add_argument("--ckpt", help="entity mode decodes with the gold relation")
    p.add_argument("--mode", choices=("single", "multi", "entity"))
    p.add_argument("--macro", action="store_true", help="macro-average multi-triplet scores over relations")
    p.add_argument("--multi-only", action="store_true", help="multi mode: only examples with 2+ gold triplets")
    p.add_argument("--max-output-len", type=int)
    p.add_argument("--beam", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate", help="choose delta or the multi-triplet threshold on validation data")
    p.add_argument("target", choices=("delta", "multi-threshold"))
    _common(p, ckpt=True)
    _decode_flags(p)
    p.add_argument("--grid", type=float, nargs="+")
    p.set_defaults(func=cmd_calibrate, split="validation")

    p = sub.add_parser("ablate", help="full configuration vs single-setting ablations")
    _common(p, ckpt=True)
    _decode_flags(p, toggles=False)
    # each flag keeps only that variant next to the full run; none given = all four rows
    p.add_argument("--no-vocab-constraint", dest="no_vocab_constraint_ablation", action="store_true")
    p.add_argument("--greedy", dest="greedy_ablation", action="store_true")
    p.add_argument("--no-filter", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("templates", help="template mining, paraphrase selection and generation")
    tsub = p.add_subparsers(dest="action", parser_class=_Parser)
    tsub.required = True
    q = tsub.add_parser("mine")
    _common(q)
    q.add_argument("--relation", required=True)
    q.add_argument("--k", type=int, default=5)
    q = tsub.add_parser("paraphrase-select")
    _common(q, data=False)
    q.add_argument("--candidates", required=True, help="JSON map relation id -> candidate patterns")
    q.add_argument("--policy", choices=("top1", "random"), default="top1")
    q = tsub.add_parser("autogen")
    _common(q, ckpt=True)
    q.add_argument("--relation", required=True)
    q.add_argument("--n", type=int, default=32, help="labeled examples used for scoring")
    q.add_argument("--beam", type=int, default=20)
    q.add_argument("--k", type=int, default=2)
    p.set_defaults(func=cmd_templates)

    p = sub.add_parser("humaneval", help="annotation export, agreement and rescoring")
    hsub = p.add_subparsers(dest="action", parser_class=_Parser)
    hsub.required = True
    q = hsub.add_parser("export")
    _common(q, data=False)
    q.add_argument("--pred", required=True)
    q.add_argument("--k", type=int, default=5)
    q.add_argument("--n", type=int, default=200)
    q.set_defaults(need_out=True)
    q = hsub.add_parser("kappa")
    _common(q, data=False)
    q.add_argument("--annotations", required=True)
    q = hsub.add_parser("rescore")
    _common(q)
    q.add_argument("--pred", required=True)
    q.add_argument("--annotations", required=True)
    p.set_defaults(func=cmd_humaneval)

    p = sub.add_parser("synthetic", help="synthetic zero-shot corpus and benchmark")
    ssub = p.add_subparsers(dest="action", parser_class=_Parser)
    ssub.required = True
    for name in ("generate", "benchmark"):
        q = ssub.add_parser(name)
        _common(q, data=False)
        q.add_argument("--n-relations", type=int, default=20)
        q.add_argument("--n-per-relation", type=int, default=50)
    q = ssub.choices["generate"]
    q.add_argument("--multi-fraction", type=float, default=0.2)
    q.set_defaults(need_out=True)
    q = ssub.choices["benchmark"]
    q.add_argument("--m", type=int, default=5)
    q.add_argument("--v", type=int, default=5)
    q.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    q.add_argument("--epochs", type=int)
    q.add_argument("--ablations", action="store_true")
    p.set_defaults(func=cmd_synthetic)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        greedy = getattr(args, "greedy", None) or getattr(args, "greedy_ablation", None)
        if greedy and getattr(args, "beam", None) is not None:
            raise UsageError("--greedy and --beam are mutually exclusive")
        if getattr(args, "need_out", False) and not args.out:
            raise UsageError(f"{args.command} needs --out")
        if getattr(args, "out", None):
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        args.command_path = " ".join(x for x in (args.command, getattr(args, "action", None),
                                                 getattr(args, "target", None)) if x)
        cfg = resolve_config(args)
        args.func(args, cfg)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except (ZettError, ValueError, KeyError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
