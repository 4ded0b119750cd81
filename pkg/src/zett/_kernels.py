"""Row-wise numeric kernels used by the transformer.

Two interchangeable implementations live here: numba ``@njit`` loops and plain
numpy expressions. ``ZETT_NUMBA=0`` in the environment (or :func:`set_backend`)
selects numpy; otherwise numba is used when it imports. Each path is
deterministic on its own; the two agree to rounding error, not bitwise. The
exp-bound softmax kernels use numpy under both settings.

All kernels take C-contiguous 2-D arrays of shape (rows, width) unless noted.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap(args[0]) if args and callable(args[0]) else wrap

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


# --------------------------------------------------------------- numpy path

def _np_layer_norm_fwd(x, g, b, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, xhat, rstd[:, 0]


def _np_layer_norm_bwd(dy, xhat, rstd, g):
    dxhat = dy * g
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    return (dxhat - m1 - xhat * m2) * rstd[:, None]


def _np_softmax_fwd(s):
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(dp, p):
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


def _np_log_softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _np_gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def _np_gelu_bwd(dy, x):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))


def _np_scatter_add_rows(out, idx, rows):
    np.add.at(out, idx, rows)


# --------------------------------------------------------------- numba path

@njit(cache=True)
def _nb_scatter_add_rows(out, idx, rows):
    n, w = rows.shape
    for i in range(n):
        r = idx[i]
        for j in range(w):
            out[r, j] += rows[i, j]


@njit(cache=True)
def _nb_layer_norm_fwd(x, g, b, eps):
    n, w = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(w):
            mu += x[i, j]
        mu /= w
        var = 0.0
        for j in range(w):
            d = x[i, j] - mu
            var += d * d
        r = 1.0 / math.sqrt(var / w + eps)
        rstd[i] = r
        for j in range(w):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * g[j] + b[j]
    return y, xhat, rstd


@njit(cache=True)
def _nb_layer_norm_bwd(dy, xhat, rstd, g):
    n, w = dy.shape
    dx = np.empty_like(dy)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(w):
            d = dy[i, j] * g[j]
            m1 += d
            m2 += d * xhat[i, j]
        m1 /= w
        m2 /= w
        for j in range(w):
            dx[i, j] = (dy[i, j] * g[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return dx


@njit(cache=True)
def _nb_softmax_bwd(dp, p):
    n, w = p.shape
    ds = np.empty_like(p)
    for i in range(n):
        dot = 0.0
        for j in range(w):
            dot += dp[i, j] * p[i, j]
        for j in range(w):
            ds[i, j] = p[i, j] * (dp[i, j] - dot)
    return ds


@njit(cache=True)
def _nb_gelu_fwd(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + math.tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out.reshape(x.shape)


@njit(cache=True)
def _nb_gelu_bwd(dy, x):
    fx = x.ravel()
    fd = dy.ravel()
    out = np.empty_like(fx)
    for i in range(fx.size):
        v = fx[i]
        t = math.tanh(GELU_C * (v + GELU_A * v * v * v))
        out[i] = fd[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v))
    return out.reshape(x.shape)


# --------------------------------------------------------------- dispatch

_IMPLS = {
    "numpy": {
        "layer_norm_fwd": _np_layer_norm_fwd,
        "layer_norm_bwd": _np_layer_norm_bwd,
        "softmax_fwd": _np_softmax_fwd,
        "softmax_bwd": _np_softmax_bwd,
        "log_softmax": _np_log_softmax,
        "gelu_fwd": _np_gelu_fwd,
        "gelu_bwd": _np_gelu_bwd,
        "scatter_add_rows": _np_scatter_add_rows,
    },
    "numba": {
        "layer_norm_fwd": _nb_layer_norm_fwd,
        "layer_norm_bwd": _nb_layer_norm_bwd,
        # numpy's vectorized exp beats a scalar math.exp loop, so the exp-bound
        # kernels stay on numpy here (see benchmarks/bench_kernels.py)
        "softmax_fwd": _np_softmax_fwd,
        "softmax_bwd": _nb_softmax_bwd,
        "log_softmax": _np_log_softmax,
        "gelu_fwd": _nb_gelu_fwd,
        "gelu_bwd": _nb_gelu_bwd,
        "scatter_add_rows": _nb_scatter_add_rows,
    },
}

_active = _IMPLS["numpy"]
BACKEND = "numpy"


def set_backend(name: str) -> None:
    global _active, BACKEND
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    if name not in _IMPLS:
        raise ValueError(f"unknown kernel backend {name!r}")
    _active = _IMPLS[name]
    BACKEND = name


set_backend("numba" if NUMBA_AVAILABLE and os.environ.get("ZETT_NUMBA", "1") != "0" else "numpy")


def _c(a):
    return np.ascontiguousarray(a)


def layer_norm_fwd(x, g, b, eps=1e-5):
    return _active["layer_norm_fwd"](_c(x), _c(g), _c(b), eps)


def layer_norm_bwd(dy, xhat, rstd, g):
    return _active["layer_norm_bwd"](_c(dy), xhat, rstd, _c(g))


def softmax_fwd(s):
    return _active["softmax_fwd"](_c(s))


def softmax_bwd(dp, p):
    return _active["softmax_bwd"](_c(dp), _c(p))


def log_softmax(x):
    return _active["log_softmax"](_c(x))


def gelu_fwd(x):
    return _active["gelu_fwd"](_c(x))


def gelu_bwd(dy, x):
    return _active["gelu_bwd"](_c(dy), _c(x))


def scatter_add_rows(out, idx, rows):
    """``out[idx[i]] += rows[i]`` in row order (in place); the embedding gradient."""
    _active["scatter_add_rows"](out, np.ascontiguousarray(idx, dtype=np.int64), _c(rows))
