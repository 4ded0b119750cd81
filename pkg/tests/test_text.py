"""Tokenizer, templates and prompt/target construction."""
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zett.data import Triplet
from zett.errors import MalformedOutputError, NullSpanError, TemplateError, ZettError
from zett.templates import (
    build_target,
    fill,
    load_template_sets,
    mask,
    parse_output,
    save_template_sets,
    validate_template,
)
from zett.tokenizer import (
    END,
    EOS,
    MASK1,
    MASK2,
    PAD,
    RESERVED,
    UNK,
    Vocabulary,
    build_vocab,
    decode,
    encode,
    normalize,
    tokenize,
)


def test_reserved_ids():
    assert (PAD, UNK, EOS, MASK1, MASK2, END) == (0, 1, 2, 3, 4, 5)
    assert RESERVED == ("<pad>", "<unk>", "</s>", "<X>", "<Y>", "<Z>")


def test_tokenize_peels_punctuation():
    assert tokenize("Hello, world!") == ["Hello", ",", "world", "!"]
    assert tokenize('"(U.S.)"') == ['"', "(", "U.S", ".", ")", '"']
    assert tokenize("a <X> b <Y> .") == ["a", "<X>", "b", "<Y>", "."]
    assert tokenize("  spaced\tout\n") == ["spaced", "out"]


@given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=60))
def test_normalize_idempotent(text):
    assert normalize(normalize(text)) == normalize(text)


def test_vocab_order_and_unknowns():
    v = build_vocab(["b a b", "c b a"])
    assert v.tokens[len(RESERVED):] == ("b", "a", "c")
    assert encode("a zzz <X>", v) == [v.id("a"), UNK, MASK1]
    assert decode([MASK1, v.id("c")], v) == "<X> c"
    with pytest.raises(ValueError):
        decode([len(v)], v)


def test_vocab_roundtrip(tmp_path):
    v = build_vocab(["x y z", "y"], min_count=1)
    v.save(tmp_path / "v.json")
    w = Vocabulary.load(tmp_path / "v.json")
    assert w == v and w.digest() == v.digest()


def test_validate_template_errors():
    with pytest.raises(TemplateError, match="missing <tail>"):
        validate_template("<head> likes")
    with pytest.raises(TemplateError, match="duplicate <head>"):
        validate_template("<head> <head> <tail>")


def test_mask_orders_sentinels_by_position():
    t = validate_template("<tail> , founded by <head> .", "P1")
    p = mask(t, "Acme was founded by Ada .")
    assert p.masked_template == "<X> , founded by <Y> ."
    assert p.prompt_text == "Acme was founded by Ada . <X> , founded by <Y> ."
    assert p.slot_map == ("tail", "head")
    tri = Triplet("Ada", "P1", "Acme")
    assert build_target(tri, p) == "<X> Acme <Y> Ada <Z>"
    assert parse_output("<X> Acme <Y> Ada <Z>", p) == ("Ada", "Acme")


def test_fill_is_single_pass():
    t = validate_template("<head> met <tail> .")
    assert fill(t, "<tail>", "Bo") == "<tail> met Bo ."
    with pytest.raises(ZettError):
        fill(t, " ", "Bo")


def test_build_target_rejects_other_relation():
    p = mask(validate_template("<head> x <tail>", "P1"), "c")
    with pytest.raises(ZettError):
        build_target(Triplet("a", "P2", "b"), p)


@pytest.mark.parametrize("text,expected", [
    ("<X> a b <Y> c <Z>", ("a b", "c")),
    ("<X> a <Y> c </s>", ("a", "c")),
    ("<X> a <Y> c <Y> junk", ("a", "c")),
    ("<X> a <Y> c", ("a", "c")),
    ("<X> a <Y> c <Z> trailing words", ("a", "c")),
])
def test_parse_output_terminators(text, expected):
    p = mask(validate_template("<head> r <tail>"), "ctx")
    assert parse_output(text, p) == expected


@pytest.mark.parametrize("text,err", [
    ("a <X> b <Y> c", MalformedOutputError),
    ("<X> a b c", MalformedOutputError),
    ("<X> <Y> c <Z>", NullSpanError),
    ("<X> a <Y> <Z>", NullSpanError),
    ("<X> a <Z> <Y> c", MalformedOutputError),
])
def test_parse_output_errors(text, err):
    p = mask(validate_template("<head> r <tail>"), "ctx")
    with pytest.raises(err):
        parse_output(text, p)


@given(st.lists(st.sampled_from(["ab", "cd", "e.f", "Gh"]), min_size=1, max_size=3),
       st.lists(st.sampled_from(["ij", "kl", "Mn"]), min_size=1, max_size=3),
       st.booleans())
def test_target_parse_roundtrip(head, tail, head_first):
    pattern = "<head> r <tail> ." if head_first else "<tail> r by <head> ."
    p = mask(validate_template(pattern, "R"), "ctx")
    tri = Triplet(" ".join(head), "R", " ".join(tail))
    assert parse_output(build_target(tri, p), p) == (tri.head, tri.tail)


def test_template_sets_roundtrip(tmp_path):
    path = tmp_path / "t.json"
    save_template_sets({"P2": ["<head> b <tail>"], "P1": [validate_template("<tail> a <head>", "P1")]}, path)
    sets = load_template_sets(path)
    assert list(sets) == ["P1", "P2"]
    assert sets["P1"][0].pattern == "<tail> a <head>" and sets["P1"][0].relation == "P1"
    path.write_text('{"P1": ["no placeholders"]}')
    with pytest.raises(TemplateError):
        load_template_sets(path)
