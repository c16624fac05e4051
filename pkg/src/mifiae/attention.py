"""Scaled dot-product multi-head attention, optionally with low-rank key/value
projection along the sequence axis."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def attention_param_shapes(embed_dim: int, kv_len: int | None = None,
                           kv_proj: int | None = None) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for p in ("q", "k", "v", "o"):
        shapes[f"w{p}"] = (embed_dim, embed_dim)
        shapes[f"b{p}"] = (embed_dim,)
    if kv_proj is not None:
        if kv_len is None:
            raise ValueError("kv_len is required when kv_proj is set")
        shapes["proj_k"] = (kv_proj, kv_len)
        shapes["proj_v"] = (kv_proj, kv_len)
    return shapes


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, dim = x.shape
    x = T.reshape(x, (*lead, length, heads, dim // heads))
    n = len(lead)
    return T.permute(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    n = len(lead)
    x = T.permute(x, tuple(range(n)) + (n + 1, n, n + 2))
    return T.reshape(x, (*lead, length, heads * dh))


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, weights: dict[str, Tensor],
                        heads: int, kv_proj: int | None = None,
                        return_weights: bool = False):
    """Attend from ``q`` ([..., Lq, E]) over ``k``/``v`` ([..., Lk, E]).

    With ``kv_proj`` set, projected keys and values are first mixed along
    the sequence axis from ``Lk`` down to ``kv_proj`` rows by the learned
    ``proj_k``/``proj_v`` matrices, so the attention map is ``Lq x kv_proj``.
    """
    embed = q.shape[-1]
    if embed % heads:
        raise ShapeError(f"attention: embed dim {embed} not divisible by {heads} heads")
    if k.shape != v.shape or k.shape[-1] != embed or k.shape[:-2] != q.shape[:-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} incompatible")
    qp = T.linear(q, weights["wq"], weights["bq"])
    kp = T.linear(k, weights["wk"], weights["bk"])
    vp = T.linear(v, weights["wv"], weights["bv"])
    if kv_proj is not None:
        if weights["proj_k"].shape != (kv_proj, k.shape[-2]):
            raise ShapeError(
                f"attention: projection {weights['proj_k'].shape} vs kv_proj={kv_proj}, L={k.shape[-2]}")
        kp = T.matmul(weights["proj_k"], kp)
        vp = T.matmul(weights["proj_v"], vp)
    qh, kh, vh = (_split_heads(t, heads) for t in (qp, kp, vp))
    n = kh.ndim
    kt = T.permute(kh, tuple(range(n - 2)) + (n - 1, n - 2))
    scores = T.scale(T.matmul(qh, kt), 1.0 / math.sqrt(embed // heads))
    attn = T.softmax(scores, axis=-1)
    out = T.linear(_merge_heads(T.matmul(attn, vh)), weights["wo"], weights["bo"])
    if return_weights:
        return out, attn
    return out


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table of shape ``[length, dim]``."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim)[None, :]
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)
    ang = pos * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))
