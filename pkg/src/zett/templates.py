"""Relation templates: validation, sentinel masking, filling and output parsing."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from .errors import MalformedOutputError, NullSpanError, TemplateError, ZettError
from .tokenizer import END, EOS, MASK1, MASK2, RESERVED

if TYPE_CHECKING:
    from .data import Triplet

HEAD, TAIL = "<head>", "<tail>"
X, Y, Z = RESERVED[MASK1], RESERVED[MASK2], RESERVED[END]
EOS_TEXT = RESERVED[EOS]


@dataclass(frozen=True)
class Template:
    relation: str
    pattern: str

    @property
    def placeholder_order(self) -> tuple[str, str]:
        """``("head", "tail")`` if ``<head>`` comes first in the pattern, else reversed."""
        if self.pattern.index(HEAD) < self.pattern.index(TAIL):
            return ("head", "tail")
        return ("tail", "head")


def validate_template(pattern: str, relation: str = "") -> Template:
    n_head, n_tail = pattern.count(HEAD), pattern.count(TAIL)
    problems = []
    for name, n in ((HEAD, n_head), (TAIL, n_tail)):
        if n == 0:
            problems.append(f"missing {name}")
        elif n > 1:
            problems.append(f"duplicate {name} ({n} occurrences)")
    if problems:
        raise TemplateError(f"invalid template {pattern!r}: " + ", ".join(problems))
    return Template(relation, pattern)


@dataclass(frozen=True)
class MaskedPrompt:
    context: str
    masked_template: str
    prompt_text: str
    slot_map: tuple[str, str]  # role filled by <X>, role filled by <Y>
    template: Template

    @property
    def relation(self) -> str:
        return self.template.relation


def mask(template: Template, context: str) -> MaskedPrompt:
    first, second = template.placeholder_order
    masked = template.pattern.replace(f"<{first}>", X, 1).replace(f"<{second}>", Y, 1)
    return MaskedPrompt(
        context=context,
        masked_template=masked,
        prompt_text=f"{context} {masked}",
        slot_map=(first, second),
        template=template,
    )


def fill(template: Template, head: str, tail: str) -> str:
    if not head.strip() or not tail.strip():
        raise ZettError("cannot fill a template with an empty entity")
    # one pass so entity text containing a placeholder literal is never re-substituted
    first, second = template.placeholder_order
    values = {"head": head, "tail": tail}
    before, rest = template.pattern.split(f"<{first}>", 1)
    middle, after = rest.split(f"<{second}>", 1)
    return before + values[first] + middle + values[second] + after


def build_target(triplet: "Triplet", prompt: MaskedPrompt) -> str:
    if triplet.relation != prompt.relation:
        raise ZettError(
            f"triplet relation {triplet.relation!r} does not match template relation {prompt.relation!r}"
        )
    values = {"head": triplet.head, "tail": triplet.tail}
    s1, s2 = (" ".join(values[role].split()) for role in prompt.slot_map)
    return f"{X} {s1} {Y} {s2} {Z}"


def parse_output(decoded: Sequence[str] | str, prompt: MaskedPrompt) -> tuple[str, str]:
    """Recover ``(head, tail)`` from a decoded ``<X> span1 <Y> span2 <term>`` sequence.

    The terminator may be ``<Z>``, ``</s>``, a repeated ``<Y>`` or simply the end
    of the token sequence. Anything after the terminator is ignored.
    """
    tokens = decoded.split() if isinstance(decoded, str) else list(decoded)
    if not tokens or tokens[0] != X:
        raise MalformedOutputError("decoded output must start with <X>")
    try:
        i_y = tokens.index(Y, 1)
    except ValueError:
        raise MalformedOutputError("decoded output has no <Y>") from None
    span1 = tokens[1:i_y]
    if any(t in (X, Z, EOS_TEXT) for t in span1):
        raise MalformedOutputError("structural token inside the first span")
    span2 = []
    for tok in tokens[i_y + 1:]:
        if tok in (Z, EOS_TEXT, Y):
            break
        if tok == X:
            raise MalformedOutputError("<X> inside the second span")
        span2.append(tok)
    if not span1:
        raise NullSpanError("empty span after <X>")
    if not span2:
        raise NullSpanError("empty span after <Y>")
    values = dict(zip(prompt.slot_map, (" ".join(span1), " ".join(span2))))
    return values["head"], values["tail"]


def load_template_sets(path) -> dict[str, list[Template]]:
    """Read a ``{relation_id: [pattern, ...]}`` JSON map, validating every pattern."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise TemplateError(f"{path}: expected a JSON object of relation id -> patterns")
    return {rid: [validate_template(p, rid) for p in pats] for rid, pats in raw.items()}


def save_template_sets(sets, path) -> None:
    obj = {rid: [t.pattern if isinstance(t, Template) else t for t in pats] for rid, pats in sorted(sets.items())}
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
