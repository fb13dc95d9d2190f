"""Pixel-word cross attention with a sigmoid gate.

Pixel embeddings query the valid word columns of a prompt feature;
the attended word context is projected back to the embedding dimension
and gated elementwise by a sigmoid of the pixel embedding. The result
is an additive increment for the caller. Invalid word columns cannot
influence the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from clicklabel.prompts import PromptFeature


@dataclass
class AttentionParams:
    """Projections: queries from pixels, keys/values from words.

    Shapes: w_query (d_e, d_a), w_key (Q, d_a), w_value (Q, d_a),
    w_out (d_a, d_e), w_gate (d_e, d_e).
    """

    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray
    w_out: np.ndarray
    w_gate: np.ndarray


@dataclass
class AttentionCache:
    """Intermediates of one forward pass, consumed by the backward pass."""

    pixel: np.ndarray
    words: np.ndarray       # (Z, Q) transposed prompt matrix
    valid: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray
    att: np.ndarray
    ctx: np.ndarray
    proj: np.ndarray
    gate: np.ndarray


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def pixel_word_attention(pixel_embeds: np.ndarray, v: PromptFeature,
                         params: AttentionParams,
                         with_cache: bool = False):
    """Fused language increment for (n, d_e) pixel embeddings.

    Scaled dot-product attention over valid word columns only; rows of
    the attention matrix sum to one. With zero valid words the increment
    is all zeros.
    """
    n, d_e = pixel_embeds.shape
    if not v.valid.any():
        inc = np.zeros((n, d_e), dtype=np.float64)
        return (inc, None) if with_cache else inc

    words = v.matrix.T  # (Z, Q)
    keys = words @ params.w_key
    values = words @ params.w_value
    queries = pixel_embeds @ params.w_query
    d_a = params.w_query.shape[1]
    scores = queries @ keys.T / np.sqrt(d_a)
    scores[:, ~v.valid] = -np.inf
    scores = scores - scores.max(axis=1, keepdims=True)
    exps = np.exp(scores)
    att = exps / exps.sum(axis=1, keepdims=True)
    ctx = att @ values
    proj = ctx @ params.w_out
    gate = _sigmoid(pixel_embeds @ params.w_gate)
    inc = gate * proj
    if not with_cache:
        return inc
    cache = AttentionCache(
        pixel=pixel_embeds, words=words, valid=v.valid, keys=keys, values=values,
        queries=queries, att=att, ctx=ctx, proj=proj, gate=gate,
    )
    return inc, cache


def pixel_word_attention_backward(d_inc: np.ndarray, params: AttentionParams,
                                  cache: AttentionCache | None):
    """Gradients of the increment w.r.t. params and pixel embeddings.

    Returns (d_pixel, grads) where grads is an AttentionParams of the
    same shapes. A ``None`` cache (no valid words) yields zeros.
    """
    if cache is None:
        zeros = AttentionParams(
            w_query=np.zeros_like(params.w_query),
            w_key=np.zeros_like(params.w_key),
            w_value=np.zeros_like(params.w_value),
            w_out=np.zeros_like(params.w_out),
            w_gate=np.zeros_like(params.w_gate),
        )
        return np.zeros((d_inc.shape[0], params.w_gate.shape[0])), zeros

    d_a = params.w_query.shape[1]
    d_gate = d_inc * cache.proj
    d_proj = d_inc * cache.gate

    d_w_out = cache.ctx.T @ d_proj
    d_ctx = d_proj @ params.w_out.T
    d_att = d_ctx @ cache.values.T
    d_values = cache.att.T @ d_ctx

    # softmax rows: ds = att * (datt - sum(datt * att))
    inner = (d_att * cache.att).sum(axis=1, keepdims=True)
    d_scores = cache.att * (d_att - inner)
    d_scores[:, ~cache.valid] = 0.0
    d_scores /= np.sqrt(d_a)

    d_queries = d_scores @ cache.keys
    d_keys = d_scores.T @ cache.queries
    d_w_query = cache.pixel.T @ d_queries
    d_w_key = cache.words.T @ d_keys
    d_w_value = cache.words.T @ d_values

    pre_gate = d_gate * cache.gate * (1.0 - cache.gate)
    d_w_gate = cache.pixel.T @ pre_gate

    d_pixel = (d_queries @ params.w_query.T) + (pre_gate @ params.w_gate.T)
    grads = AttentionParams(
        w_query=d_w_query, w_key=d_w_key, w_value=d_w_value,
        w_out=d_w_out, w_gate=d_w_gate,
    )
    return d_pixel, grads
