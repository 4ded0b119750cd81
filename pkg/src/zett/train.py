"""Fine-tuning loop: AdamW with decoupled weight decay and linear warm-up/decay."""
from __future__ import annotations

import logging
import math
import string
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .errors import TrainingDiverged
from .model import Seq2Seq
from .rng import SplitMix64, derive_seed
from .templates import build_target, mask
from .tokenizer import SENTINELS, UNK, Vocabulary, encode, tokenize

log = logging.getLogger(__name__)

# (input ids, target ids[, positions of template words in the input])
Pair = tuple


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 3e-5
    warmup_ratio: float = 0.2
    epochs: int = 3
    weight_decay: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float = 1.0  # 0 disables clipping
    max_steps: int = 0  # 0 = epochs * batches per epoch
    # chance of replacing each template word of a prompt with <unk>, per step
    template_word_dropout: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must be in [0, 1]")
        if not 0.0 <= self.template_word_dropout < 1.0:
            raise ValueError("template_word_dropout must be in [0, 1)")
        if self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def lr_at(step: int, total: int, base: float, warmup_ratio: float) -> float:
    """Learning rate for 1-based ``step``: linear ramp to ``base`` at the end of
    warm-up, then linear decay reaching 0 at ``total``."""
    warmup = int(round(warmup_ratio * total))
    if warmup and step <= warmup:
        return base * step / warmup
    if total == warmup:
        return base
    return base * max(0.0, (total - step) / (total - warmup))


def relation_specific_words(dataset: Dataset) -> frozenset[str]:
    """Template words used by exactly one of the relations that occur in ``dataset``."""
    owners: dict[str, set[str]] = {}
    for rid in sorted({t.relation for ex in dataset.examples for t in ex.triplets}):
        for tpl in dataset.relations[rid].templates:
            for tok in tokenize(tpl.pattern):
                owners.setdefault(tok, set()).add(rid)
    return frozenset(w for w, rels in owners.items() if len(rels) == 1)


def make_pairs(dataset: Dataset, vocab: Vocabulary, all_templates: bool = False) -> list[Pair]:
    """(input ids, target ids, hideable positions) for every gold triplet, using
    each relation's first template (or every template with ``all_templates``).

    Hideable positions index the template words specific to one relation (the
    relation phrase) inside the input; ``template_word_dropout`` masks them so
    the model also learns slot order from the template's shared structure.
    """
    specific = relation_specific_words(dataset)
    pairs = []
    for ex in dataset.examples:
        offset = len(tokenize(ex.context))
        for t in ex.triplets:
            spec = dataset.relations[t.relation]
            for tpl in (spec.templates if all_templates else spec.templates[:1]):
                prompt = mask(tpl, ex.context)
                words = tuple(offset + i for i, tok in enumerate(tokenize(prompt.masked_template))
                              if tok in specific and tok not in SENTINELS
                              and not all(c in string.punctuation for c in tok))
                pairs.append((encode(prompt.prompt_text, vocab), encode(build_target(t, prompt), vocab), words))
    return pairs


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params, grads, lr):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            m, v, p = self.m[k], self.v[k], params[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            step = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if p.ndim >= 2 and c.weight_decay:  # decay matrices only, not gains or biases
                step = step + c.weight_decay * p
            p -= (lr * step).astype(p.dtype)


def _grad_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def _hide_words(pair: Pair, rate: float, rng) -> tuple[list[int], list[int]]:
    src, tgt = pair[0], pair[1]
    if rate and len(pair) > 2 and pair[2]:
        hide = [p for p in pair[2] if rng.random() < rate]
        if hide:
            src = list(src)
            for p in hide:
                src[p] = UNK
    return src, tgt


def train(model: Seq2Seq, pairs: Sequence[Pair], cfg: TrainConfig,
          callback: Callable[[int, float], None] | None = None) -> tuple[Seq2Seq, list[float]]:
    """Train ``model`` in place and return it with the per-step loss curve.

    Batch order is reshuffled each epoch from ``SplitMix64(derive_seed(seed,
    "train-shuffle", epoch))``; runs with the same seed are bit-identical.
    """
    if not pairs:
        raise ValueError("training set is empty")
    per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    total = cfg.max_steps or cfg.epochs * per_epoch
    opt = AdamW(model.params, cfg)
    drop_rng = np.random.default_rng(derive_seed(cfg.seed, "dropout"))
    word_rng = np.random.default_rng(derive_seed(cfg.seed, "template-word-dropout"))
    curve: list[float] = []
    step, epoch = 0, 0
    while step < total:
        order = list(range(len(pairs)))
        SplitMix64(derive_seed(cfg.seed, "train-shuffle", epoch)).shuffle(order)
        for b in range(per_epoch):
            if step >= total:
                break
            step += 1
            batch = [_hide_words(pairs[i], cfg.template_word_dropout, word_rng)
                     for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            loss, grads = model.loss_and_grads(batch, rng=drop_rng)
            gnorm = _grad_norm(grads)
            lr = lr_at(step, total, cfg.learning_rate, cfg.warmup_ratio)
            if not (math.isfinite(loss) and math.isfinite(gnorm)):
                raise TrainingDiverged(f"non-finite loss/gradient at step {step} (epoch {epoch}, "
                                       f"lr={lr:.3g}, loss={loss}, grad_norm={gnorm})")
            if cfg.max_grad_norm and gnorm > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / gnorm
                grads = {k: g * scale for k, g in grads.items()}
            opt.update(model.params, grads, lr)
            model.step += 1
            curve.append(loss)
            if callback is not None:
                callback(step, loss)
        epoch += 1
    log.info("trained %d steps, final loss %.4f", step, curve[-1])
    return model, curve
