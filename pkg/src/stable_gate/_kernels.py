"""Hot inner loops of the micro-LM, in two interchangeable flavours.

Every kernel exists as a pure-numpy function (``*_np``) and as a numba
``@njit`` function (``*_nb``).  The public names (``attention_forward`` ...)
are bound to one flavour at import time:

    STABLE_GATE_NUMBA=0   -> numpy path
    STABLE_GATE_NUMBA=1   -> numba path (default when numba imports)

The two paths agree to ~1e-13 but are not bit-identical (different
summation order), so reproducibility guarantees hold per backend.
"""
from __future__ import annotations

import math
import os

import numpy as np

LN_EPS = 1e-5

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


def _env_wants_numba() -> bool:
    flag = os.environ.get("STABLE_GATE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no", "")


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def attention_forward_np(q, k, v):
    """Causal scaled dot-product attention over (H, T, dh) arrays."""
    H, T, dh = q.shape
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    mask = np.triu(np.ones((T, T), dtype=bool), 1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    return probs @ v, probs


def attention_backward_np(q, k, v, probs, dout):
    dh = q.shape[-1]
    dv = probs.transpose(0, 2, 1) @ dout
    dp = dout @ v.transpose(0, 2, 1)
    ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
    ds /= math.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    return dq, dk, dv


def layernorm_forward_np(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, xhat, rstd


def layernorm_backward_np(dy, xhat, rstd, g):
    d = xhat.shape[-1]
    dg = (dy * xhat).sum(axis=0, keepdims=True)
    db = dy.sum(axis=0, keepdims=True)
    dxhat = dy * g
    dx = rstd / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dg, db


def log_softmax_np(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

@njit(cache=True)
def attention_forward_nb(q, k, v):
    H, T, dh = q.shape
    scale = 1.0 / math.sqrt(dh)
    out = np.zeros((H, T, dh))
    probs = np.zeros((H, T, T))
    for h in range(H):
        for i in range(T):
            m = -np.inf
            for j in range(i + 1):
                s = 0.0
                for c in range(dh):
                    s += q[h, i, c] * k[h, j, c]
                s *= scale
                probs[h, i, j] = s
                if s > m:
                    m = s
            tot = 0.0
            for j in range(i + 1):
                e = math.exp(probs[h, i, j] - m)
                probs[h, i, j] = e
                tot += e
            for j in range(i + 1):
                p = probs[h, i, j] / tot
                probs[h, i, j] = p
                for c in range(dh):
                    out[h, i, c] += p * v[h, j, c]
    return out, probs


@njit(cache=True)
def attention_backward_nb(q, k, v, probs, dout):
    H, T, dh = q.shape
    scale = 1.0 / math.sqrt(dh)
    dq = np.zeros((H, T, dh))
    dk = np.zeros((H, T, dh))
    dv = np.zeros((H, T, dh))
    dp = np.zeros(T)
    for h in range(H):
        for i in range(T):
            acc = 0.0
            for j in range(i + 1):
                s = 0.0
                for c in range(dh):
                    s += dout[h, i, c] * v[h, j, c]
                    dv[h, j, c] += probs[h, i, j] * dout[h, i, c]
                dp[j] = s
                acc += s * probs[h, i, j]
            for j in range(i + 1):
                ds = probs[h, i, j] * (dp[j] - acc) * scale
                for c in range(dh):
                    dq[h, i, c] += ds * k[h, j, c]
                    dk[h, j, c] += ds * q[h, i, c]
    return dq, dk, dv


@njit(cache=True)
def layernorm_forward_nb(x, g, b):
    T, d = x.shape
    y = np.empty((T, d))
    xhat = np.empty((T, d))
    rstd = np.empty((T, 1))
    for t in range(T):
        mu = 0.0
        for c in range(d):
            mu += x[t, c]
        mu /= d
        var = 0.0
        for c in range(d):
            diff = x[t, c] - mu
            var += diff * diff
        var /= d
        r = 1.0 / math.sqrt(var + LN_EPS)
        rstd[t, 0] = r
        for c in range(d):
            xh = (x[t, c] - mu) * r
            xhat[t, c] = xh
            y[t, c] = xh * g[0, c] + b[0, c]
    return y, xhat, rstd


@njit(cache=True)
def layernorm_backward_nb(dy, xhat, rstd, g):
    T, d = dy.shape
    dx = np.empty((T, d))
    dg = np.zeros((1, d))
    db = np.zeros((1, d))
    for t in range(T):
        s1 = 0.0
        s2 = 0.0
        for c in range(d):
            dg[0, c] += dy[t, c] * xhat[t, c]
            db[0, c] += dy[t, c]
            dxh = dy[t, c] * g[0, c]
            s1 += dxh
            s2 += dxh * xhat[t, c]
        r = rstd[t, 0] / d
        for c in range(d):
            dxh = dy[t, c] * g[0, c]
            dx[t, c] = r * (d * dxh - s1 - xhat[t, c] * s2)
    return dx, dg, db


@njit(cache=True)
def log_softmax_nb(x):
    T, V = x.shape
    out = np.empty((T, V))
    for t in range(T):
        m = -np.inf
        for j in range(V):
            if x[t, j] > m:
                m = x[t, j]
        tot = 0.0
        for j in range(V):
            tot += math.exp(x[t, j] - m)
        lse = m + math.log(tot)
        for j in range(V):
            out[t, j] = x[t, j] - lse
    return out


NUMPY_KERNELS = {
    "attention_forward": attention_forward_np,
    "attention_backward": attention_backward_np,
    "layernorm_forward": layernorm_forward_np,
    "layernorm_backward": layernorm_backward_np,
    "log_softmax": log_softmax_np,
}

NUMBA_KERNELS = {
    "attention_forward": attention_forward_nb,
    "attention_backward": attention_backward_nb,
    "layernorm_forward": layernorm_forward_nb,
    "layernorm_backward": layernorm_backward_nb,
    "log_softmax": log_softmax_nb,
}

USE_NUMBA = HAS_NUMBA and _env_wants_numba()
BACKEND = "numba" if USE_NUMBA else "numpy"

_active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS
attention_forward = _active["attention_forward"]
attention_backward = _active["attention_backward"]
layernorm_forward = _active["layernorm_forward"]
layernorm_backward = _active["layernorm_backward"]
log_softmax = _active["log_softmax"]
