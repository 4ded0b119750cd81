"""Binary checkpoint container.

Layout::

    b"ZETTCKPT" | u32 version | u32 header_len | header (UTF-8 JSON) | tensors

The header holds the model config, vocabulary digest, step counter, seed and a
tensor manifest ``[{"name", "shape"}]``. Tensors follow in manifest order as
little-endian float32, row-major. Serialization is canonical, so
save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig, Seq2Seq
from .tokenizer import Vocabulary

MAGIC = b"ZETTCKPT"
VERSION = 1


def to_bytes(model: Seq2Seq, vocab: Vocabulary | None = None) -> bytes:
    manifest = [{"name": n, "shape": list(a.shape)} for n, a in model.params.items()]
    header = {
        "config": model.cfg.to_json(),
        "vocab_digest": vocab.digest() if vocab is not None else None,
        "step": int(model.step),
        "seed": int(model.seed),
        "tensors": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in model.params.values()]
    return b"".join(parts)


def from_bytes(buf: bytes, vocab: Vocabulary | None = None) -> Seq2Seq:
    if buf[:8] != MAGIC:
        raise DataError("not a checkpoint (bad magic bytes)")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    if vocab is not None and header["vocab_digest"] not in (None, vocab.digest()):
        raise DataError("checkpoint was trained with a different vocabulary")
    offset = 16 + hlen
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[entry["name"]] = arr.astype(np.float32)
        offset += 4 * count
    if offset != len(buf):
        raise DataError("checkpoint has trailing or missing bytes")
    model = Seq2Seq(ModelConfig(**header["config"]), params=params, seed=header["seed"])
    model.step = header["step"]
    return model


def save(model: Seq2Seq, path: str | Path, vocab: Vocabulary | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, vocab))


def load(path: str | Path, vocab: Vocabulary | None = None) -> Seq2Seq:
    return from_bytes(Path(path).read_bytes(), vocab)
