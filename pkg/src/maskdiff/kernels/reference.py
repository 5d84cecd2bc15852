"""Pure-numpy reference implementations of the attention kernels.

Semantics here are the contract; the compiled extension in _native.pyx
must agree within floating-point tolerance. Disallowed entries come out
as exact zeros in both implementations.
"""

from __future__ import annotations

import numpy as np


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the entries where mask is true.

    scores: (..., Lq, Lk) float32 or float64.
    mask:   (Lq, Lk) bool-ish, shared across all leading dimensions.
    Returns probabilities of the same shape and dtype as scores. Rows with
    no allowed entries come back as all zeros.
    """
    scores = np.asarray(scores)
    if scores.dtype not in (np.float32, np.float64):
        raise TypeError(f"scores must be float32 or float64, got {scores.dtype}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape[-2:]:
        raise ValueError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    neg_inf = np.array(-np.inf, dtype=scores.dtype)
    x = np.where(mask, scores, neg_inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, scores.dtype.type(0))
    e = np.exp(x - m)
    s = np.sum(e, axis=-1, keepdims=True)
    safe = np.where(s > 0, s, scores.dtype.type(1))
    return np.where(s > 0, e / safe, scores.dtype.type(0))


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Gradient of row-wise softmax given its output.

    dscores[i] = probs[i] * (dprobs[i] - sum_j dprobs[i,j] * probs[i,j]).
    Rows that softmax zeroed out (fully masked) yield zero gradient, and
    disallowed entries stay exactly zero because probs is zero there.
    """
    probs = np.asarray(probs)
    dprobs = np.asarray(dprobs)
    if probs.shape != dprobs.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {dprobs.shape}")
    dot = np.sum(probs * dprobs, axis=-1, keepdims=True)
    return probs * (dprobs - dot)
