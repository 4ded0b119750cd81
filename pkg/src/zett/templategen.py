"""Template induction: middle-word mining, paraphrase selection and
span-infilling generation scored by the model on a few labeled rows."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .data import Dataset, find_span
from .decoding import DecodeConfig, allowed_tokens, search
from .errors import TemplateError
from .model import ScoringBackend
from .rng import SplitMix64
from .templates import HEAD, TAIL, X, build_target, mask, validate_template
from .tokenizer import END, EOS, MASK1, encode, tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TemplateCandidate:
    pattern: str
    source: str  # mined | paraphrased | autogen
    support: int = 0
    lm_score: float = float("nan")

    def __post_init__(self):
        validate_template(self.pattern)
        if self.source not in ("mined", "paraphrased", "autogen"):
            raise ValueError(f"unknown template source {self.source!r}")


def mine_templates(corpus: Dataset, relation: str, top_k: int = 5) -> list[TemplateCandidate]:
    """Middle-word rule: the words between the first occurrences of the two
    entities, wrapped in placeholders in the order the entities appear."""
    counts: Counter = Counter()
    for ex in corpus.examples:
        toks = tokenize(ex.context)
        for t in ex.triplets:
            if t.relation != relation:
                continue
            h_tok, t_tok = tokenize(t.head), tokenize(t.tail)
            hi, ti = find_span(toks, h_tok), find_span(toks, t_tok)
            if hi < 0 or ti < 0:
                log.warning("example %s: entity not found in context, skipped", ex.id)
                continue
            if hi < ti:
                first, second, start, stop = HEAD, TAIL, hi + len(h_tok), ti
            else:
                first, second, start, stop = TAIL, HEAD, ti + len(t_tok), hi
            middle = toks[start:stop]
            if not middle:  # adjacent or overlapping entities carry no relation phrase
                continue
            counts[f"{first} {' '.join(middle)} {second}"] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [TemplateCandidate(p, "mined", support=n) for p, n in ranked[:top_k]]


def _valid(pattern: str) -> bool:
    try:
        validate_template(pattern)
    except TemplateError:
        return False
    return True


def select_paraphrase(candidates: Sequence[str], policy: str = "top1", seed: int = 0) -> str:
    """Pick one pattern from a paraphrase set (duplicates count as frequency).

    ``top1``: most frequent, ties to the lexicographically smallest.
    ``random``: uniform over the distinct valid patterns, drawn with SplitMix64(seed).
    """
    counts = Counter(p for p in candidates if _valid(p))
    if not counts:
        raise TemplateError("no valid candidate pattern")
    if policy == "top1":
        return min(counts, key=lambda p: (-counts[p], p))
    if policy == "random":
        distinct = sorted(counts)
        return distinct[SplitMix64(seed).below(len(distinct))]
    raise ValueError(f"unknown policy {policy!r}")


class Paraphraser(Protocol):
    def paraphrase(self, pattern: str, n: int) -> list[str]:
        """``n`` rewrites of ``pattern``; ones that lose a placeholder get discarded downstream."""


SYNONYMS = {
    "is": ("was", "remains"),
    "of": ("for", "in"),
    "born": ("raised",),
    "father": ("parent", "dad"),
    "member": ("part",),
    "employed": ("hired", "working"),
    "located": ("situated", "based"),
    "the": ("a",),
    "by": ("through",),
}


class RuleParaphraser:
    """Deterministic stand-in for a translation model: synonym swaps from a
    fixed table and single-word drops, never touching placeholders."""

    def __init__(self, synonyms: dict[str, Sequence[str]] | None = None):
        self.synonyms = dict(SYNONYMS if synonyms is None else synonyms)

    def variants(self, pattern: str) -> list[str]:
        toks = pattern.split()
        out = []
        for i, tok in enumerate(toks):
            for alt in self.synonyms.get(tok.lower(), ()):
                out.append(" ".join(toks[:i] + [alt] + toks[i + 1:]))
        for i, tok in enumerate(toks):
            if tok not in (HEAD, TAIL) and len(toks) > 3:
                out.append(" ".join(toks[:i] + toks[i + 1:]))
        return out or [pattern]

    def paraphrase(self, pattern: str, n: int) -> list[str]:
        pool = self.variants(pattern)
        return [pool[i % len(pool)] for i in range(n)]


def two_stage_paraphrase(forward: Paraphraser, backward: Paraphraser, pattern: str,
                         n_mid: int = 7, n_back: int = 7) -> list[str]:
    """Pivot-style generation: ``n_mid`` intermediates, each rewritten ``n_back``
    times (7 x 7 = 49 by default). Invalid outputs are dropped."""
    out = []
    for mid in forward.paraphrase(pattern, n_mid):
        out += [p for p in backward.paraphrase(mid, n_back) if _valid(p)]
    return out


def check_zero_leak(labeled_ids: Iterable[str], training_ids: Iterable[str]) -> None:
    overlap = set(labeled_ids) & set(training_ids)
    if overlap:
        raise ValueError(f"{len(overlap)} template-scoring examples are also training examples, "
                         f"e.g. {sorted(overlap)[:3]}")


def pattern_score(backend: ScoringBackend, labeled: Dataset, relation: str, pattern: str) -> float:
    """Mean log-probability of the gold infilling targets under ``pattern``."""
    tpl = validate_template(pattern, relation)
    vals = []
    for ex in labeled.examples:
        for t in ex.triplets:
            if t.relation == relation:
                prompt = mask(tpl, ex.context)
                vals.append(backend.sequence_logprob(encode(prompt.prompt_text, backend.vocab),
                                                     encode(build_target(t, prompt), backend.vocab)))
    return float(np.mean(vals)) if vals else float("-inf")


def autogen_templates(backend: ScoringBackend, labeled: Dataset, relation: str, beam: int = 20,
                      top_k: int = 2, max_span_len: int = 8,
                      vocab_constraint: bool = False) -> list[TemplateCandidate]:
    """Decode the relation phrase between each labeled pair in both orders,
    turn every decoded span into a pattern and keep the ``top_k`` best-scoring."""
    cfg = DecodeConfig(beam_size=beam, max_candidates_per_relation=beam, max_output_len=max_span_len + 2,
                       vocab_constraint=vocab_constraint, slots=1)
    vocab = backend.vocab
    patterns = set()
    for ex in labeled.examples:
        for t in ex.triplets:
            if t.relation != relation:
                continue
            for first, second, a, b in ((HEAD, TAIL, t.head, t.tail), (TAIL, HEAD, t.tail, t.head)):
                ids = encode(f"{ex.context} {a} {X} {b}", vocab)
                allowed = allowed_tokens(ex.context, vocab) if vocab_constraint else None
                for hyp in search(backend, ids, cfg, allowed):
                    span = [vocab.tokens[i] for i in hyp.tokens if i not in (MASK1, END, EOS)]
                    if span:
                        patterns.add(f"{first} {' '.join(span)} {second} .")
    scored = [TemplateCandidate(p, "autogen", lm_score=pattern_score(backend, labeled, relation, p))
              for p in sorted(patterns)]
    scored.sort(key=lambda c: (-c.lm_score, c.pattern))
    return scored[:top_k]
