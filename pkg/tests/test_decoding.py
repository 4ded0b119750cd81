import math

import numpy as np
import pytest
from oracles import TableBackend, brute_force_top, greedy_loop, make_vocab

from zett.decoding import DecodeConfig, allowed_tokens, beam_search, content_ids, decode_relation, min_remaining, search
from zett.templates import mask, validate_template
from zett.tokenizer import END, EOS, MASK1, MASK2, PAD, UNK, encode, tokenize

WORDS = [f"w{i}" for i in range(12)]


def random_instance(i, n_allowed=3):
    vocab = make_vocab(WORDS)
    rng = np.random.default_rng(i)
    n = int(rng.integers(1, n_allowed + 1))
    words = list(rng.choice(WORDS, n, replace=False))
    context = " ".join(words)
    return TableBackend(vocab, seed=i), context, words


def test_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(beam_size=2, max_candidates_per_relation=3)
    assert DecodeConfig(beam_size=2, max_candidates_per_relation=3, greedy=True).width == 1
    with pytest.raises(ValueError):
        DecodeConfig(slots=3)


def test_allowed_tokens_excludes_pad_and_unk():
    vocab = make_vocab(["a", "b"])
    allowed = allowed_tokens("a zzz a", vocab)
    assert allowed == {vocab.id("a"), EOS, MASK1, MASK2, END}
    assert PAD not in allowed and UNK not in allowed


def test_min_remaining():
    assert min_remaining([], 2) == 5
    assert min_remaining([MASK1, 7], 2) == 3
    assert min_remaining([MASK1, 7, MASK2], 2) == 2
    assert min_remaining([MASK1, 7, MASK2, 8], 2) == 1
    assert min_remaining([MASK1, 7, MASK2, 8, END], 2) == 0
    assert min_remaining([MASK1], 1) == 2


@pytest.mark.parametrize("i", range(100))
def test_beam_matches_brute_force(i):
    backend, context, _ = random_instance(i)
    ids = encode(context, backend.vocab)
    allowed = allowed_tokens(context, backend.vocab)
    content = content_ids(backend.vocab, allowed)
    cfg = DecodeConfig(beam_size=256, max_candidates_per_relation=3, max_output_len=6)
    got = search(backend, ids, cfg, allowed)
    want = brute_force_top(backend, ids, content, 6, 3)
    assert [h.tokens for h in got] == [seq for _, seq in want]
    for h, (s, _) in zip(got, want):
        assert abs(h.score - s) <= 1e-9


@pytest.mark.parametrize("i", range(20))
def test_single_slot_beam_matches_brute_force(i):
    backend, context, _ = random_instance(1000 + i)
    allowed = allowed_tokens(context, backend.vocab)
    cfg = DecodeConfig(beam_size=64, max_candidates_per_relation=3, max_output_len=5, slots=1)
    got = search(backend, [], cfg, allowed)
    want = brute_force_top(backend, [], content_ids(backend.vocab, allowed), 5, 3, slots=1)
    assert [(h.tokens, round(h.score, 9)) for h in got] == [(seq, round(s, 9)) for s, seq in want]


def test_constraint_soundness_and_greedy_equivalence():
    template = validate_template("<tail> , r by <head> .", "R")
    for i in range(1000):
        backend, context, words = random_instance(5000 + i, n_allowed=4)
        vocab = backend.vocab
        prompt = mask(template, context)
        cfg = DecodeConfig(beam_size=4, max_candidates_per_relation=4, max_output_len=7)
        for cand in decode_relation(backend, context, template, cfg):
            for ent in (cand.triplet.head, cand.triplet.tail):
                assert set(tokenize(ent)) <= set(words)
        allowed = allowed_tokens(prompt, vocab)
        ids = encode(prompt.prompt_text, vocab)
        beam1 = search(backend, ids, DecodeConfig(beam_size=1, max_candidates_per_relation=1, max_output_len=7),
                       allowed)
        ref = greedy_loop(backend, ids, content_ids(vocab, allowed), 7)
        if ref is None:
            assert beam1 == []
        else:
            assert len(beam1) == 1 and beam1[0].tokens == ref[0]
            assert math.isclose(beam1[0].score, ref[1], rel_tol=0, abs_tol=1e-12)


def test_greedy_flag_equals_beam_one():
    backend, context, _ = random_instance(7)
    ids = encode(context, backend.vocab)
    a = search(backend, ids, DecodeConfig(greedy=True, max_output_len=8))
    b = search(backend, ids, DecodeConfig(beam_size=1, max_candidates_per_relation=1, max_output_len=8))
    assert a == b


def test_outputs_are_well_formed_without_vocab_constraint():
    backend, context, _ = random_instance(3)
    prompt = mask(validate_template("<head> r <tail>", "R"), context)
    cfg = DecodeConfig(beam_size=8, max_candidates_per_relation=8, max_output_len=8, vocab_constraint=False)
    for out, (head, tail) in beam_search(backend, prompt, cfg):
        assert out.tokens[0] == MASK1 and out.tokens[-1] in (END, EOS)
        assert head.split() and tail.split()
        assert out.tokens.count(MASK2) == 1


def test_too_short_budget_returns_nothing():
    backend, context, _ = random_instance(2)
    prompt = mask(validate_template("<head> r <tail>", "R"), context)
    assert beam_search(backend, prompt, DecodeConfig(max_output_len=4)) == []


def test_unconstrained_grammar_filters_malformed():
    backend, context, _ = random_instance(4)
    prompt = mask(validate_template("<head> r <tail>", "R"), context)
    cfg = DecodeConfig(beam_size=16, max_candidates_per_relation=16, max_output_len=8, grammar_constraint=False)
    for out, (head, tail) in beam_search(backend, prompt, cfg):
        assert head.strip() and tail.strip()


def test_decode_relation_ranked_and_deduplicated():
    backend, context, _ = random_instance(11, n_allowed=3)
    tpl = validate_template("<head> r <tail>", "R")
    cands = decode_relation(backend, context, tpl, DecodeConfig(beam_size=12, max_candidates_per_relation=12,
                                                                 max_output_len=8))
    keys = [c.triplet.key() for c in cands]
    assert len(keys) == len(set(keys))
    assert [c.sort_key() for c in cands] == sorted(c.sort_key() for c in cands)
    assert all(c.template_used == tpl.pattern and c.triplet.relation == "R" for c in cands)
