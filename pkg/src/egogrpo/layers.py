"""Layers with explicit backward passes for the perceptual scorer."""
from __future__ import annotations

import math

import numpy as np

from egogrpo.numerics import DimensionError, Rng


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: Rng | None = None, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.w = rng.normal((d_in, d_out)) * math.sqrt(1.0 / d_in) if rng is not None else np.zeros((d_in, d_out))
        self.b = np.zeros(d_out) if bias else None

    @property
    def params(self):
        return [self.w] if self.b is None else [self.w, self.b]

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"linear layer expects width {self.d_in}, got {x.shape[-1]}")
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y, x

    def backward(self, x, gy):
        x2 = x.reshape(-1, self.d_in)
        g2 = gy.reshape(-1, self.d_out)
        grads = [x2.T @ g2]
        if self.b is not None:
            grads.append(g2.sum(axis=0))
        return grads, gy @ self.w.T


class Attention:
    """Single-head scaled dot-product attention with output projection.

    Operates on the second-to-last axis: queries ``(..., Lq, d)`` attend over
    keys/values ``(..., Lk, d)``.
    """

    def __init__(self, d: int, rng: Rng | None = None, out_scale: float = 1.0):
        self.d = d
        self.q = Linear(d, d, rng.child("q") if rng else None, bias=False)
        self.k = Linear(d, d, rng.child("k") if rng else None, bias=False)
        self.v = Linear(d, d, rng.child("v") if rng else None, bias=False)
        self.o = Linear(d, d, rng.child("o") if rng else None, bias=False)
        self.o.w *= out_scale

    @property
    def params(self):
        return self.q.params + self.k.params + self.v.params + self.o.params

    def forward(self, xq, xkv):
        q, _ = self.q.forward(xq)
        k, _ = self.k.forward(xkv)
        v, _ = self.v.forward(xkv)
        scale = 1.0 / math.sqrt(self.d)
        a = softmax(np.matmul(q, np.swapaxes(k, -1, -2)) * scale)
        o = np.matmul(a, v)
        y, _ = self.o.forward(o)
        return y, (xq, xkv, q, k, v, a, o)

    def backward(self, cache, gy):
        xq, xkv, q, k, v, a, o = cache
        scale = 1.0 / math.sqrt(self.d)
        (g_wo,), g_o = self.o.backward(o, gy)
        g_a = np.matmul(g_o, np.swapaxes(v, -1, -2))
        g_v = np.matmul(np.swapaxes(a, -1, -2), g_o)
        g_s = a * (g_a - np.sum(g_a * a, axis=-1, keepdims=True)) * scale
        g_q = np.matmul(g_s, k)
        g_k = np.matmul(np.swapaxes(g_s, -1, -2), q)
        (g_wq,), g_xq = self.q.backward(xq, g_q)
        (g_wk,), g_xk = self.k.backward(xkv, g_k)
        (g_wv,), g_xv = self.v.backward(xkv, g_v)
        return [g_wq, g_wk, g_wv, g_wo], g_xq, g_xk + g_xv


def sinusoid_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    ang = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))
