"""Sub-layer math shared by the plain reference path and the host zone.

Both execution paths call these helpers with their own weight tensors (plain
weights vs obfuscated ones), so the sequence and order of floating-point
operations is identical on both sides. With identity obfuscation keys the two
paths therefore produce bit-identical values; with orthogonal keys they differ
only by rounding in the extra obfuscation products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import gelu, gelu_grad, matmul, softmax_rows


def _t(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


@dataclass
class LinearTape:
    x: np.ndarray
    w: np.ndarray
    lora_a: np.ndarray | None
    lora_b: np.ndarray | None
    scaling: float
    drop_mask: np.ndarray | None
    mid_dropped: np.ndarray | None


def linear_with_lora(x, w, lora_a=None, lora_b=None, scaling=0.0, drop_mask=None, bias=None):
    """x @ w, plus the scaled low-rank branch, plus bias; order pinned."""
    out = matmul(x, w)
    mid_dropped = None
    if lora_a is not None:
        mid = matmul(x, lora_a)
        mid_dropped = mid * drop_mask if drop_mask is not None else mid
        out = out + x.dtype.type(scaling) * matmul(mid_dropped, lora_b)
    if bias is not None:
        out = out + bias
    tape = LinearTape(x, w, lora_a, lora_b, scaling, drop_mask, mid_dropped)
    return out, tape


def linear_with_lora_backward(d_out: np.ndarray, tape: LinearTape):
    """Returns (d_x, d_lora_a, d_lora_b); base weight and bias are frozen."""
    d_x = matmul(d_out, _t(tape.w))
    d_a = d_b = None
    if tape.lora_a is not None:
        s = d_out.dtype.type(tape.scaling)
        d_b = s * matmul(_t(tape.mid_dropped), d_out)
        d_mid = s * matmul(d_out, _t(tape.lora_b))
        if tape.drop_mask is not None:
            d_mid = d_mid * tape.drop_mask
        d_a = matmul(_t(tape.x), d_mid)
        d_x = d_x + matmul(d_mid, _t(tape.lora_a))
    return d_x, d_a, d_b


@dataclass
class AttentionTape:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    n_head: int
    probs: list          # per head, post-softmax
    probs_dropped: list  # per head, post dropout mask
    drop_masks: list     # per head or None


def attention_heads(q, k, v, n_head, drop_masks=None):
    """Causal multi-head attention on assembled q/k/v; returns concatenated heads."""
    seq, d_model = q.shape
    d_head = d_model // n_head
    scale = q.dtype.type(1.0 / math.sqrt(d_head))
    causal = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    h_all = np.empty_like(q)
    probs, probs_dropped, masks_used = [], [], []
    for h in range(n_head):
        lo, hi = h * d_head, (h + 1) * d_head
        scores = matmul(q[:, lo:hi] * scale, _t(k[:, lo:hi]))
        scores[causal] = -np.inf
        p = softmax_rows(scores)
        mask = drop_masks[h] if drop_masks is not None else None
        pd = p * mask if mask is not None else p
        h_all[:, lo:hi] = matmul(pd, v[:, lo:hi])
        probs.append(p)
        probs_dropped.append(pd)
        masks_used.append(mask)
    tape = AttentionTape(q, k, v, n_head, probs, probs_dropped, masks_used)
    return h_all, tape


def attention_heads_backward(d_h_all: np.ndarray, tape: AttentionTape):
    """Returns (d_q, d_k, d_v) for the assembled projections."""
    q, k, v = tape.q, tape.k, tape.v
    n_head = tape.n_head
    d_head = q.shape[1] // n_head
    scale = q.dtype.type(1.0 / math.sqrt(d_head))
    d_q = np.empty_like(q)
    d_k = np.empty_like(k)
    d_v = np.empty_like(v)
    for h in range(n_head):
        lo, hi = h * d_head, (h + 1) * d_head
        p, pd, mask = tape.probs[h], tape.probs_dropped[h], tape.drop_masks[h]
        d_hh = np.ascontiguousarray(d_h_all[:, lo:hi])
        d_pd = matmul(d_hh, _t(v[:, lo:hi]))
        d_v[:, lo:hi] = matmul(_t(pd), d_hh)
        d_p = d_pd * mask if mask is not None else d_pd
        d_scores = p * (d_p - np.sum(d_p * p, axis=-1, keepdims=True))
        qh_scaled = q[:, lo:hi] * scale
        d_q[:, lo:hi] = matmul(d_scores, np.ascontiguousarray(k[:, lo:hi])) * scale
        d_k[:, lo:hi] = matmul(_t(d_scores), qh_scaled)
    return d_q, d_k, d_v


def activation(u: np.ndarray) -> np.ndarray:
    return gelu(u)


def activation_backward(d_g: np.ndarray, u: np.ndarray) -> np.ndarray:
    return d_g * gelu_grad(u)
