"""Micro encoder-decoder transformer with analytic gradients, plus the scoring
backend interface that the decoder and pipeline talk to.

Architecture: shared token embedding + fixed sinusoidal positions, pre-layer-
norm encoder and decoder stacks (self-attention, cross-attention, GELU
feed-forward), final layer norms, and an output projection that is tied to the
embedding by default (scaled by ``d_model ** -0.5``). The decoder is fed
``[PAD] + target[:-1]``.
"""
from __future__ import annotations

import abc
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K
from .errors import LengthError
from .rng import derive_seed
from .tokenizer import END, EOS, MASK1, MASK2, PAD, Vocabulary

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 128
    max_input_len: int = 128
    max_output_len: int = 64
    dropout: float = 0.0
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if min(self.max_input_len, self.max_output_len, self.vocab_size) < 1:
            raise ValueError("lengths and vocab_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, f, V = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["embed"] = (V, d)
    if not cfg.tie_embeddings:
        shapes["out.w"] = (d, V)
    shapes["out.b"] = (V,)

    def ln(name):
        shapes[f"{name}.g"] = (d,)
        shapes[f"{name}.b"] = (d,)

    def attn(name):
        for n in _attn_names(name):
            shapes[n] = (d, d) if n.rsplit(".", 1)[1].startswith("w") else (d,)

    def ffn(name):
        shapes[f"{name}.w1"], shapes[f"{name}.b1"] = (d, f), (f,)
        shapes[f"{name}.w2"], shapes[f"{name}.b2"] = (f, d), (d,)

    for i in range(cfg.encoder_layers):
        ln(f"enc.{i}.ln1"); attn(f"enc.{i}.attn"); ln(f"enc.{i}.ln2"); ffn(f"enc.{i}.ffn")
    ln("enc.ln")
    for i in range(cfg.decoder_layers):
        ln(f"dec.{i}.ln1"); attn(f"dec.{i}.self"); ln(f"dec.{i}.ln2"); attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3"); ffn(f"dec.{i}.ffn")
    ln("dec.ln")
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(derive_seed(seed, "init"))
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "embed":
            w = rng.standard_normal(shape)
        elif leaf == "g":
            w = np.ones(shape)
        elif len(shape) == 2:
            w = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            w = np.zeros(shape)
        params[name] = w.astype(dtype)
    return params


# ------------------------------------------------------------------ layers
# Each forward returns (out, cache); cache is None when gradients are not needed.

def _linear(x, w, b):
    # 2-D matmul so numpy dispatches straight to BLAS
    return (x.reshape(-1, w.shape[0]) @ w + b).reshape(*x.shape[:-1], w.shape[1])


def _linear_bwd(dy, x, w, grads, wname, bname):
    d_in, d_out = w.shape
    x2, dy2 = x.reshape(-1, d_in), dy.reshape(-1, d_out)
    grads[wname] += x2.T @ dy2
    grads[bname] += dy2.sum(axis=0)
    return (dy2 @ w.T).reshape(*dy.shape[:-1], d_in)


def _ln(x, p, name, train):
    shape = x.shape
    y, xhat, rstd = K.layer_norm_fwd(x.reshape(-1, shape[-1]), p[f"{name}.g"], p[f"{name}.b"])
    return y.reshape(shape), ((xhat, rstd, name) if train else None)


def _ln_bwd(dy, cache, p, grads):
    xhat, rstd, name = cache
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads[f"{name}.g"] += (dy2 * xhat).sum(axis=0)
    grads[f"{name}.b"] += dy2.sum(axis=0)
    return K.layer_norm_bwd(dy2, xhat, rstd, p[f"{name}.g"]).reshape(dy.shape)


def _split_heads(x, h):
    B, T, d = x.shape
    return x.reshape(B, T, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * dh)


def _mha(xq, xkv, p, name, heads, bias, train):
    """Multi-head attention; ``bias`` is additive, broadcastable to (B, h, Tq, Tk)."""
    q = _split_heads(_linear(xq, p[f"{name}.wq"], p[f"{name}.bq"]), heads)
    k = _split_heads(_linear(xkv, p[f"{name}.wk"], p[f"{name}.bk"]), heads)
    v = _split_heads(_linear(xkv, p[f"{name}.wv"], p[f"{name}.bv"]), heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = (q @ k.transpose(0, 1, 3, 2)) * scale + bias
    tk = s.shape[-1]
    a = K.softmax_fwd(s.reshape(-1, tk)).reshape(s.shape)
    c = _merge_heads(a @ v)
    out = _linear(c, p[f"{name}.wo"], p[f"{name}.bo"])
    cache = (xq, xkv, q, k, v, a, c, scale, name, heads) if train else None
    return out, cache


def _mha_bwd(dout, cache, p, grads):
    xq, xkv, q, k, v, a, c, scale, name, heads = cache
    dc = _split_heads(_linear_bwd(dout, c, p[f"{name}.wo"], grads, f"{name}.wo", f"{name}.bo"), heads)
    da = dc @ v.transpose(0, 1, 3, 2)
    if v.shape[0] == a.shape[0]:
        dv = a.transpose(0, 1, 3, 2) @ dc
    else:  # memory broadcast over the batch
        dv = (a.transpose(0, 1, 3, 2) @ dc).sum(axis=0, keepdims=True)
    tk = a.shape[-1]
    ds = K.softmax_bwd(da.reshape(-1, tk), a.reshape(-1, tk)).reshape(a.shape) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    if k.shape[0] != dk.shape[0]:
        dk = dk.sum(axis=0, keepdims=True)
    dxq = _linear_bwd(_merge_heads(dq), xq, p[f"{name}.wq"], grads, f"{name}.wq", f"{name}.bq")
    dxkv = _linear_bwd(_merge_heads(dk), xkv, p[f"{name}.wk"], grads, f"{name}.wk", f"{name}.bk")
    dxkv = dxkv + _linear_bwd(_merge_heads(dv), xkv, p[f"{name}.wv"], grads, f"{name}.wv", f"{name}.bv")
    return dxq, dxkv


def _ffn(x, p, name, train):
    h = _linear(x, p[f"{name}.w1"], p[f"{name}.b1"])
    g = K.gelu_fwd(h)
    out = _linear(g, p[f"{name}.w2"], p[f"{name}.b2"])
    return out, ((x, h, g, name) if train else None)


def _ffn_bwd(dout, cache, p, grads):
    x, h, g, name = cache
    dg = _linear_bwd(dout, g, p[f"{name}.w2"], grads, f"{name}.w2", f"{name}.b2")
    dh = K.gelu_bwd(dg, h)
    return _linear_bwd(dh, x, p[f"{name}.w1"], grads, f"{name}.w1", f"{name}.b1")


def _dropout(x, rate, rng):
    if rng is None or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


# ------------------------------------------------------------------ model

def _pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(1, int(lengths.max(initial=0)))), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


class Seq2Seq:
    """Parameters plus forward/backward passes. Not thread-safe during training;
    inference methods only read the parameters."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        self.params = params if params is not None else init_params(cfg, seed, dtype)
        self.dtype = next(iter(self.params.values())).dtype
        self.step = 0
        n = max(cfg.max_input_len, cfg.max_output_len)
        self._pe = sinusoidal_positions(n, cfg.d_model).astype(self.dtype)

    # -- embeddings and masks

    def _embed(self, ids):
        return self.params["embed"][ids] + self._pe[: ids.shape[1]]

    def _key_bias(self, lengths, t):
        valid = np.arange(t)[None, :] < lengths[:, None]
        return np.where(valid, 0.0, NEG_INF).astype(self.dtype)[:, None, None, :]

    def _causal_bias(self, lengths, t):
        causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
        return np.where(causal, 0.0, NEG_INF).astype(self.dtype) + self._key_bias(lengths, t)

    def _check_lengths(self, src_len, tgt_len=None):
        if src_len.max(initial=0) > self.cfg.max_input_len:
            raise LengthError(f"input length {src_len.max()} exceeds max_input_len {self.cfg.max_input_len}")
        if src_len.min(initial=1) < 1:
            raise LengthError("empty input sequence")
        if tgt_len is not None and tgt_len.max(initial=0) > self.cfg.max_output_len:
            raise LengthError(f"output length {tgt_len.max()} exceeds max_output_len {self.cfg.max_output_len}")

    # -- stacks

    def _encoder(self, src, src_len, train, rng=None):
        p, cfg = self.params, self.cfg
        bias = self._key_bias(src_len, src.shape[1])
        x = self._embed(src)
        caches = []
        for i in range(cfg.encoder_layers):
            a, c1 = _ln(x, p, f"enc.{i}.ln1", train)
            o, c2 = _mha(a, a, p, f"enc.{i}.attn", cfg.heads, bias, train)
            o, m1 = _dropout(o, cfg.dropout, rng)
            x = x + o
            b, c3 = _ln(x, p, f"enc.{i}.ln2", train)
            o, c4 = _ffn(b, p, f"enc.{i}.ffn", train)
            o, m2 = _dropout(o, cfg.dropout, rng)
            x = x + o
            caches.append((c1, c2, m1, c3, c4, m2))
        mem, cf = _ln(x, p, "enc.ln", train)
        return mem, bias, (caches, cf)

    def _decoder(self, tgt_in, tgt_len, mem, mem_bias, train, rng=None):
        p, cfg = self.params, self.cfg
        bias = self._causal_bias(tgt_len, tgt_in.shape[1])
        y = self._embed(tgt_in)
        caches = []
        for i in range(cfg.decoder_layers):
            a, c1 = _ln(y, p, f"dec.{i}.ln1", train)
            o, c2 = _mha(a, a, p, f"dec.{i}.self", cfg.heads, bias, train)
            o, m1 = _dropout(o, cfg.dropout, rng)
            y = y + o
            b, c3 = _ln(y, p, f"dec.{i}.ln2", train)
            o, c4 = _mha(b, mem, p, f"dec.{i}.cross", cfg.heads, mem_bias, train)
            o, m2 = _dropout(o, cfg.dropout, rng)
            y = y + o
            c, c5 = _ln(y, p, f"dec.{i}.ln3", train)
            o, c6 = _ffn(c, p, f"dec.{i}.ffn", train)
            o, m3 = _dropout(o, cfg.dropout, rng)
            y = y + o
            caches.append((c1, c2, m1, c3, c4, m2, c5, c6, m3))
        h, cf = _ln(y, p, "dec.ln", train)
        return self._project(h), (caches, cf, h)

    def _project(self, h):
        p = self.params
        h2 = h.reshape(-1, h.shape[-1])
        if self.cfg.tie_embeddings:
            out = (h2 @ p["embed"].T) * (self.cfg.d_model ** -0.5) + p["out.b"]
        else:
            out = h2 @ p["out.w"] + p["out.b"]
        return out.reshape(*h.shape[:-1], -1)

    # -- public forward API

    def logits(self, inputs: Sequence[Sequence[int]], decoder_inputs: Sequence[Sequence[int]]) -> np.ndarray:
        """Logits at every decoder position, shape (B, T, V)."""
        src, src_len = _pad_batch(inputs)
        tgt, tgt_len = _pad_batch(decoder_inputs)
        self._check_lengths(src_len, tgt_len)
        mem, mem_bias, _ = self._encoder(src, src_len, False)
        out, _ = self._decoder(tgt, tgt_len, mem, mem_bias, False)
        return out

    def forward(self, input_ids, output_prefix_ids) -> np.ndarray:
        """Next-token logits after ``output_prefix_ids``.

        Accepts one sequence pair (returns shape (V,)) or two equal-length lists
        of sequences (returns (B, V)).
        """
        single = len(input_ids) == 0 or np.isscalar(input_ids[0])
        inputs = [list(input_ids)] if single else [list(s) for s in input_ids]
        prefixes = [list(output_prefix_ids)] if single else [list(s) for s in output_prefix_ids]
        dec_in = [[PAD] + s for s in prefixes]
        out = self.logits(inputs, dec_in)
        last = np.array([len(s) for s in dec_in]) - 1
        res = out[np.arange(len(dec_in)), last]
        return res[0] if single else res

    def encode(self, input_ids: Sequence[int]):
        src, src_len = _pad_batch([list(input_ids)])
        self._check_lengths(src_len)
        mem, mem_bias, _ = self._encoder(src, src_len, False)
        return mem, mem_bias

    def next_logits(self, memory, prefixes: np.ndarray) -> np.ndarray:
        """Logits for the position after each row of ``prefixes`` (K, t), sharing one encoded input."""
        mem, mem_bias = memory
        prefixes = np.asarray(prefixes, dtype=np.int64).reshape(len(prefixes), -1)
        k, t = prefixes.shape
        if t + 1 > self.cfg.max_output_len:
            raise LengthError(f"output length {t + 1} exceeds max_output_len {self.cfg.max_output_len}")
        tgt = np.concatenate([np.full((k, 1), PAD, dtype=np.int64), prefixes], axis=1)
        out, _ = self._decoder(tgt, np.full(k, t + 1), mem, mem_bias, False)
        return out[:, -1]

    # -- training

    def loss(self, input_ids, target_ids) -> float:
        """Mean token negative log-likelihood under teacher forcing."""
        single = len(input_ids) == 0 or np.isscalar(input_ids[0])
        batch = [(list(input_ids), list(target_ids))] if single else list(zip(input_ids, target_ids))
        return self.loss_and_grads(batch, need_grads=False)[0]

    def loss_and_grads(self, batch: Sequence[tuple[Sequence[int], Sequence[int]]], need_grads: bool = True,
                       rng: np.random.Generator | None = None):
        if any(len(t) == 0 for _, t in batch):
            raise ValueError("empty target sequence")
        src, src_len = _pad_batch([s for s, _ in batch])
        tgt, tgt_len = _pad_batch([t for _, t in batch])
        self._check_lengths(src_len, tgt_len)
        dec_in = np.concatenate([np.full((len(batch), 1), PAD, dtype=np.int64), tgt[:, :-1]], axis=1)
        drop_rng = rng if (need_grads and self.cfg.dropout > 0) else None
        mem, mem_bias, enc_cache = self._encoder(src, src_len, need_grads, drop_rng)
        logits, dec_cache = self._decoder(dec_in, tgt_len, mem, mem_bias, need_grads, drop_rng)
        B, T, V = logits.shape
        weights = (np.arange(T)[None, :] < tgt_len[:, None]).reshape(-1)
        count = weights.sum()
        logp = K.log_softmax(logits.reshape(-1, V))
        picked = logp[np.arange(B * T), tgt.reshape(-1)]
        loss = float(-(picked * weights).sum(dtype=np.float64) / count)
        if not need_grads:
            return loss, None
        dlogits = np.exp(logp)
        dlogits[np.arange(B * T), tgt.reshape(-1)] -= 1.0
        dlogits *= (weights / count)[:, None].astype(self.dtype)
        grads = self._backward(dlogits.reshape(B, T, V), enc_cache, dec_cache, src, dec_in)
        return loss, grads

    def _backward(self, dlogits, enc_cache, dec_cache, src, dec_in):
        p, cfg = self.params, self.cfg
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        caches, cf, h = dec_cache
        V = dlogits.shape[-1]
        d2 = dlogits.reshape(-1, V)
        grads["out.b"] += d2.sum(axis=0)
        h2 = h.reshape(-1, cfg.d_model)
        if cfg.tie_embeddings:
            s = cfg.d_model ** -0.5
            grads["embed"] += (d2.T @ h2) * s
            dh = ((d2 @ p["embed"]) * s).reshape(h.shape)
        else:
            grads["out.w"] += h2.T @ d2
            dh = (d2 @ p["out.w"].T).reshape(h.shape)
        dy = _ln_bwd(dh, cf, p, grads)
        dmem = None
        for i in reversed(range(cfg.decoder_layers)):
            c1, c2, m1, c3, c4, m2, c5, c6, m3 = caches[i]
            do = dy * m3 if m3 is not None else dy
            dy = dy + _ln_bwd(_ffn_bwd(do, c6, p, grads), c5, p, grads)
            do = dy * m2 if m2 is not None else dy
            dq, dk = _mha_bwd(do, c4, p, grads)
            dmem = dk if dmem is None else dmem + dk
            dy = dy + _ln_bwd(dq, c3, p, grads)
            do = dy * m1 if m1 is not None else dy
            dq, dk = _mha_bwd(do, c2, p, grads)
            dy = dy + _ln_bwd(dq + dk, c1, p, grads)
        dec_in_grad = dy
        enc_caches, ecf = enc_cache
        dx = _ln_bwd(dmem, ecf, p, grads)
        for i in reversed(range(cfg.encoder_layers)):
            c1, c2, m1, c3, c4, m2 = enc_caches[i]
            do = dx * m2 if m2 is not None else dx
            dx = dx + _ln_bwd(_ffn_bwd(do, c4, p, grads), c3, p, grads)
            do = dx * m1 if m1 is not None else dx
            dq, dk = _mha_bwd(do, c2, p, grads)
            dx = dx + _ln_bwd(dq + dk, c1, p, grads)
        self._embed_bwd(dx, src, grads)
        self._embed_bwd(dec_in_grad, dec_in, grads)
        return grads

    @staticmethod
    def _embed_bwd(d, ids, grads):
        K.scatter_add_rows(grads["embed"], ids.reshape(-1), d.reshape(-1, d.shape[-1]))


# ------------------------------------------------------------------ scoring backends

SENTINEL_IDS = frozenset({MASK1, MASK2, END, EOS})


class ScoringBackend(abc.ABC):
    """What the decoder needs from a language model: P(y_t | y_<t, x).

    Implementations must return log-probabilities whose exponentials sum to 1.
    Subclasses can override the batched and whole-sequence methods for speed;
    the defaults are defined in terms of :meth:`next_token_logprobs`.
    """

    vocab: Vocabulary

    @abc.abstractmethod
    def next_token_logprobs(self, input_ids: Sequence[int], prefix_ids: Sequence[int]) -> np.ndarray:
        ...

    def batch_next_token_logprobs(self, input_ids: Sequence[int], prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        return np.stack([self.next_token_logprobs(input_ids, p) for p in prefixes])

    def step_logprobs(self, input_ids: Sequence[int], output_ids: Sequence[int]) -> np.ndarray:
        """log P(y_t | y_<t, x) for each position of ``output_ids``."""
        out = list(output_ids)
        return np.array([self.next_token_logprobs(input_ids, out[:t])[out[t]] for t in range(len(out))])

    def sequence_logprob(self, input_ids: Sequence[int], output_ids: Sequence[int],
                         exclude_sentinels: bool = False) -> float:
        """Sum of token log-probabilities, sentinels and terminator included by default."""
        out = list(output_ids)
        if not out:
            return 0.0
        steps = self.step_logprobs(input_ids, out)
        if exclude_sentinels:
            steps = steps[[t not in SENTINEL_IDS for t in out]]
        return float(np.sum(steps))


class MicroBackend(ScoringBackend):
    """Scoring backend over a :class:`Seq2Seq`; log-probabilities in float64."""

    def __init__(self, model: Seq2Seq, vocab: Vocabulary, cache_size: int = 64):
        if len(vocab) != model.cfg.vocab_size:
            raise ValueError(f"vocabulary size {len(vocab)} != model vocab_size {model.cfg.vocab_size}")
        self.model = model
        self.vocab = vocab
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    def _memory(self, input_ids):
        key = tuple(int(i) for i in input_ids)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        mem = self.model.encode(key)
        with self._lock:
            self._cache[key] = mem
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return mem

    def batch_next_token_logprobs(self, input_ids, prefixes):
        logits = self.model.next_logits(self._memory(input_ids), np.asarray(prefixes, dtype=np.int64))
        return K.log_softmax(logits.astype(np.float64))

    def next_token_logprobs(self, input_ids, prefix_ids):
        return self.batch_next_token_logprobs(input_ids, [list(prefix_ids)])[0]

    def step_logprobs(self, input_ids, output_ids):
        out = list(output_ids)
        if not out:
            return np.zeros(0)
        logits = self.model.logits([list(input_ids)], [[PAD] + out[:-1]])[0]
        logp = K.log_softmax(logits.astype(np.float64))
        return logp[np.arange(len(out)), out]
