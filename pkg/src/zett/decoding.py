"""Grammar- and vocabulary-constrained beam search over a scoring backend."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .data import Triplet
from .errors import DataError, ParseError
from .model import ScoringBackend
from .templates import MaskedPrompt, Template, mask, parse_output
from .tokenizer import END, EOS, MASK1, MASK2, PAD, RESERVED, UNK, Vocabulary, encode, tokenize

TERMINATORS = (END, EOS)
STRUCTURAL_IDS = frozenset({MASK1, MASK2, END, EOS})


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 4
    max_candidates_per_relation: int = 4
    max_output_len: int = 64
    vocab_constraint: bool = True
    greedy: bool = False
    # restrict hypotheses to  <X> w+ <Y> w+ (<Z>|</s>)  while searching
    grammar_constraint: bool = True
    # 2 = entity-pair infilling, 1 = single span ``<X> w+ <term>`` (template generation)
    slots: int = 2

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_candidates_per_relation < 1:
            raise ValueError("max_candidates_per_relation must be >= 1")
        if self.max_candidates_per_relation > self.beam_size and not self.greedy:
            raise ValueError("max_candidates_per_relation cannot exceed beam_size")
        if self.slots not in (1, 2):
            raise ValueError("slots must be 1 or 2")

    @property
    def width(self) -> int:
        return 1 if self.greedy else self.beam_size

    @property
    def n_candidates(self) -> int:
        return 1 if self.greedy else self.max_candidates_per_relation


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    finished: bool


@dataclass(frozen=True)
class InfilledOutput:
    tokens: tuple[int, ...]
    text: str
    score: float


@dataclass(frozen=True)
class ScoredCandidate:
    triplet: Triplet
    score: float
    relation_similarity: float = float("nan")
    template_used: str = ""

    def sort_key(self):
        return (-self.score, self.triplet.relation, self.triplet.head, self.triplet.tail)


def allowed_tokens(prompt: MaskedPrompt | str, vocab: Vocabulary) -> frozenset[int]:
    """Ids of the context's tokens plus the structural tokens; never PAD or UNK."""
    context = prompt.context if isinstance(prompt, MaskedPrompt) else prompt
    ids = {vocab.id(t) for t in tokenize(context)}
    ids -= {PAD, UNK}
    return frozenset(ids | STRUCTURAL_IDS)


def content_ids(vocab: Vocabulary, allowed: Iterable[int] | None) -> np.ndarray:
    base = range(len(RESERVED), len(vocab)) if allowed is None else allowed
    return np.array(sorted(i for i in base if i not in STRUCTURAL_IDS and i not in (PAD, UNK)), dtype=np.int64)


def _grammar_state(tokens: Sequence[int], slots: int) -> str:
    """Where a prefix sits in the target grammar."""
    if not tokens:
        return "start"
    last, n_mask = tokens[-1], sum(1 for t in tokens if t in (MASK1, MASK2))
    if last in TERMINATORS:
        return "done"
    if last in (MASK1, MASK2):
        return "need_content" if n_mask < slots else "need_last_content"
    if n_mask < slots:
        return "span_open"  # may continue or open the next slot
    return "span_last"  # may continue or terminate


# fewest tokens needed to finish from each state
_MIN_REMAINING = {
    ("start", 1): 3, ("start", 2): 5,
    ("need_content", 2): 4, ("need_last_content", 1): 2, ("need_last_content", 2): 2,
    ("span_open", 2): 3, ("span_last", 1): 1, ("span_last", 2): 1,
}


def min_remaining(tokens: Sequence[int], slots: int) -> int:
    state = _grammar_state(tokens, slots)
    return 0 if state == "done" else _MIN_REMAINING[(state, slots)]


def permitted_mask(tokens: Sequence[int], vocab_size: int, content: np.ndarray, slots: int,
                   grammar: bool, budget: int | None = None) -> np.ndarray:
    """Boolean mask of next tokens. With ``grammar``, only continuations that can
    still be completed within ``budget`` further tokens (this one included) pass."""
    ok = np.zeros(vocab_size, dtype=bool)
    if not grammar:
        ok[content] = True
        ok[list(STRUCTURAL_IDS)] = True
        return ok
    tokens = list(tokens)
    fits = (lambda t: budget is None or 1 + min_remaining(tokens + [t], slots) <= budget)
    state = _grammar_state(tokens, slots)
    if state == "done":
        return ok
    if state == "start":
        ok[MASK1] = fits(MASK1)
        return ok
    if len(content) and fits(int(content[0])):
        ok[content] = True
    if state == "span_open" and fits(MASK2):
        ok[MASK2] = True
    elif state == "span_last":
        ok[list(TERMINATORS)] = True
    return ok


def search(backend: ScoringBackend, input_ids: Sequence[int], cfg: DecodeConfig,
           allowed: Iterable[int] | None = None) -> list[Hypothesis]:
    """Length-synchronous beam search returning finished hypotheses.

    At every step all expansions of the live beam are ranked by (score desc,
    token sequence asc) and the best ``width`` kept; those ending in ``<Z>`` or
    ``</s>`` move to the finished pool. Unfinished hypotheses still alive at
    ``max_output_len`` are dropped. Search stops early once the pool holds
    enough candidates that no live hypothesis can outrank (scores only fall).
    """
    vocab_size = len(backend.vocab)
    content = content_ids(backend.vocab, allowed if cfg.vocab_constraint else None)
    width, want = cfg.width, cfg.n_candidates
    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[Hypothesis] = []
    for length in range(cfg.max_output_len):
        if not alive:
            break
        budget = cfg.max_output_len - length
        logp = backend.batch_next_token_logprobs(input_ids, [list(t) for t, _ in alive])
        scores, toks, parents = [], [], []
        for i, (tokens, score) in enumerate(alive):
            ok = permitted_mask(tokens, vocab_size, content, cfg.slots, cfg.grammar_constraint, budget)
            cand = np.nonzero(ok & np.isfinite(logp[i]))[0]
            toks.append(cand)
            parents.append(np.full(len(cand), i))
            scores.append(score + logp[i, cand])
        if not any(len(c) for c in toks):
            break
        toks, parents, scores = np.concatenate(toks), np.concatenate(parents), np.concatenate(scores)
        # lexicographic rank of parent sequences (all the same length) for the tie-break
        lex = np.empty(len(alive), dtype=np.int64)
        lex[sorted(range(len(alive)), key=lambda i: alive[i][0])] = np.arange(len(alive))
        order = np.lexsort((toks, lex[parents], -scores))[:width]
        alive_next = []
        for j in order:
            tokens = alive[parents[j]][0] + (int(toks[j]),)
            if tokens[-1] in TERMINATORS:
                finished.append(Hypothesis(tokens, float(scores[j]), True))
            else:
                alive_next.append((tokens, float(scores[j])))
        alive = alive_next
        if len(finished) >= want and alive:
            finished.sort(key=lambda h: (-h.score, h.tokens))
            if finished[want - 1].score > max(s for _, s in alive):
                break
    finished.sort(key=lambda h: (-h.score, h.tokens))
    return finished[:want]


def prompt_ids(backend: ScoringBackend, prompt: MaskedPrompt) -> list[int]:
    return encode(prompt.prompt_text, backend.vocab)


def beam_search(backend: ScoringBackend, prompt: MaskedPrompt,
                cfg: DecodeConfig) -> list[tuple[InfilledOutput, tuple[str, str]]]:
    """Decode one prompt; keep hypotheses that parse to a (head, tail) pair.

    Ranked by (score desc, token ids asc). Returns an empty list when nothing
    well-formed finishes within ``max_output_len``.
    """
    vocab = backend.vocab
    allowed = allowed_tokens(prompt, vocab) if cfg.vocab_constraint else None
    cfg = replace(cfg, slots=2)
    out = []
    for hyp in search(backend, prompt_ids(backend, prompt), cfg, allowed):
        text = " ".join(vocab.tokens[t] for t in hyp.tokens)
        try:
            pair = parse_output(text, prompt)
        except ParseError:
            continue
        out.append((InfilledOutput(hyp.tokens, text, hyp.score), pair))
    return out


def decode_relation(backend: ScoringBackend, context: str, template: Template,
                    cfg: DecodeConfig) -> list[ScoredCandidate]:
    prompt = mask(template, context)
    best: dict[tuple, ScoredCandidate] = {}
    for output, (head, tail) in beam_search(backend, prompt, cfg):
        try:
            triplet = Triplet(head, template.relation, tail)
        except DataError:
            continue
        cand = ScoredCandidate(triplet, output.score, template_used=template.pattern)
        key = triplet.key()
        if key not in best or cand.score > best[key].score:
            best[key] = cand
    return sorted(best.values(), key=ScoredCandidate.sort_key)
