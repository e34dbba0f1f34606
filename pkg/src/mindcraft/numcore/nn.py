"""Attention and transformer layers as plain functions over parameter dicts.

Parameters live in a flat ``dict[str, Parameter]``; a layer reads the entries
under its prefix. Attention projections are bias-free so that zero values give
a zero output.
"""

from __future__ import annotations

import numpy as np

from . import (
    Parameter, ShapeMismatch, Tensor, add, gelu, layer_norm, matmul, reshape, scale,
    softmax, transpose,
)


def init_attention(params, prefix, d_model, rng, std=0.02, dtype=np.float64):
    for w in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{w}"] = Parameter(rng.normal(0.0, std, (d_model, d_model)).astype(dtype),
                                            name=f"{prefix}.{w}")


def init_block(params, prefix, d_model, rng, mlp_ratio=4, std=0.02, dtype=np.float64):
    init_attention(params, f"{prefix}.attn", d_model, rng, std, dtype)
    hidden = mlp_ratio * d_model
    params[f"{prefix}.ln1.g"] = Parameter(np.ones(d_model, dtype), f"{prefix}.ln1.g")
    params[f"{prefix}.ln1.b"] = Parameter(np.zeros(d_model, dtype), f"{prefix}.ln1.b")
    params[f"{prefix}.ln2.g"] = Parameter(np.ones(d_model, dtype), f"{prefix}.ln2.g")
    params[f"{prefix}.ln2.b"] = Parameter(np.zeros(d_model, dtype), f"{prefix}.ln2.b")
    params[f"{prefix}.mlp.w1"] = Parameter(rng.normal(0.0, std, (d_model, hidden)).astype(dtype),
                                           f"{prefix}.mlp.w1")
    params[f"{prefix}.mlp.b1"] = Parameter(np.zeros(hidden, dtype), f"{prefix}.mlp.b1")
    params[f"{prefix}.mlp.w2"] = Parameter(rng.normal(0.0, std, (hidden, d_model)).astype(dtype),
                                           f"{prefix}.mlp.w2")
    params[f"{prefix}.mlp.b2"] = Parameter(np.zeros(d_model, dtype), f"{prefix}.mlp.b2")


def _split_heads(x, heads):
    B, L, D = x.shape
    return transpose(reshape(x, (B, L, heads, D // heads)), (0, 2, 1, 3))


def cross_attention(q_in, k_in, v_in, wq, wk, wv, wo, heads, key_mask=None, causal=False):
    """Multi-head scaled dot-product attention.

    q_in: (B, Lq, D); k_in, v_in: (B, Lk, D). key_mask is a (B, Lk) bool array of
    attendable keys. Heads are concatenated and passed through ``wo``.
    """
    if q_in.ndim != 3 or k_in.ndim != 3 or v_in.ndim != 3:
        raise ShapeMismatch("attention inputs must be (batch, length, dim)")
    B, Lq, D = q_in.shape
    Lk = k_in.shape[1]
    if D % heads:
        raise ShapeMismatch(f"model dim {D} not divisible by {heads} heads")
    if k_in.shape[0] != B or v_in.shape[:2] != k_in.shape[:2] or k_in.shape[2] != D:
        raise ShapeMismatch(f"key/value shapes {k_in.shape}, {v_in.shape} vs query {q_in.shape}")
    dh = D // heads
    q = _split_heads(matmul(q_in, wq), heads)
    k = _split_heads(matmul(k_in, wk), heads)
    v = _split_heads(matmul(v_in, wv), heads)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[:, None, None, :]
    if causal:
        tri = np.tril(np.ones((Lq, Lk), dtype=bool))[None, None]
        mask = tri if mask is None else (mask & tri)
    attn = softmax(scores, axis=-1, mask=mask)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))
    return matmul(reshape(out, (B, Lq, D)), wo)


def attention(params, prefix, q_in, kv_in, heads, key_mask=None, causal=False):
    return cross_attention(q_in, kv_in, kv_in, params[f"{prefix}.wq"], params[f"{prefix}.wk"],
                           params[f"{prefix}.wv"], params[f"{prefix}.wo"], heads,
                           key_mask=key_mask, causal=causal)


def causal_self_attention_block(params, prefix, x, heads, key_mask=None):
    """Pre-norm transformer block with a strict causal mask."""
    h = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = add(x, attention(params, f"{prefix}.attn", h, h, heads, key_mask=key_mask, causal=True))
    h = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = gelu(add(matmul(h, params[f"{prefix}.mlp.w1"]), params[f"{prefix}.mlp.b1"]))
    h = add(matmul(h, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])
    return add(x, h)

