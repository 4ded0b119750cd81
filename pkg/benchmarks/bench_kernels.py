"""Time the numba kernels against their numpy fallbacks, then a full training step.

Usage:
    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --rows 4096 --width 128 --repeat 50 --output bench.json
"""
import argparse
import json
import time

import numpy as np

from zett import _kernels as K
from zett.model import ModelConfig, Seq2Seq


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rows, width, rng):
    x = rng.standard_normal((rows, width)).astype(np.float32)
    dy = rng.standard_normal((rows, width)).astype(np.float32)
    g = np.ones(width, dtype=np.float32)
    b = np.zeros(width, dtype=np.float32)
    _, xhat, rstd = K._np_layer_norm_fwd(x, g, b, 1e-5)
    p = K._np_softmax_fwd(x)
    idx = rng.integers(0, 512, rows)
    out = np.zeros((512, width), dtype=np.float32)
    return {
        "layer_norm_fwd": (x, g, b, 1e-5),
        "layer_norm_bwd": (dy, xhat, rstd, g),
        "softmax_bwd": (dy, p),
        "gelu_fwd": (x,),
        "gelu_bwd": (dy, x),
        "scatter_add_rows": (out, idx, x),
    }


def train_step_time(backend, repeat, batch=64, src_len=20, tgt_len=8, vocab=600):
    K.set_backend(backend)
    rng = np.random.default_rng(0)
    model = Seq2Seq(ModelConfig(vocab_size=vocab), seed=0)
    pairs = [(list(rng.integers(6, vocab, src_len)), list(rng.integers(6, vocab, tgt_len))) for _ in range(batch)]
    model.loss_and_grads(pairs)  # warm-up / compile
    return best_of(lambda: model.loss_and_grads(pairs), repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=2048)
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--output", help="write results as JSON")
    args = ap.parse_args()

    if not K.NUMBA_AVAILABLE:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    results = {"kernels": {}, "train_step": {}}
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call_args in kernel_cases(args.rows, args.width, rng).items():
        fns = {impl: K._IMPLS[impl][name] for impl in ("numpy", "numba")}
        if fns["numba"] is fns["numpy"]:
            continue
        fns["numba"](*[a.copy() if isinstance(a, np.ndarray) else a for a in call_args])  # compile
        t = {impl: best_of(lambda f=f, a=call_args: f(*a), args.repeat) for impl, f in fns.items()}
        results["kernels"][name] = t
        print(f"{name:<18}{1e3 * t['numpy']:>10.3f}{1e3 * t['numba']:>10.3f}{t['numpy'] / t['numba']:>8.1f}x")

    active = K.BACKEND
    for impl in ("numpy", "numba"):
        results["train_step"][impl] = train_step_time(impl, max(3, args.repeat // 4))
    K.set_backend(active)
    t = results["train_step"]
    print(f"\ntraining step (batch 64): numpy {1e3 * t['numpy']:.1f} ms, numba {1e3 * t['numba']:.1f} ms, "
          f"{t['numpy'] / t['numba']:.1f}x")
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
