"""Fused attention-softmax kernels.

One pass per row over contiguous memory instead of the chain of
temporaries the numpy reference materializes. Semantics match
reference.py exactly; see there for the contract.
"""

from libc.math cimport INFINITY, exp

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.cdivision(True)
cdef void _masked_softmax_3d(
    floating[:, :, ::1] scores,
    const cnp.uint8_t[:, ::1] mask,
    floating[:, :, ::1] out,
) noexcept nogil:
    cdef Py_ssize_t n_group = scores.shape[0]
    cdef Py_ssize_t n_q = scores.shape[1]
    cdef Py_ssize_t n_k = scores.shape[2]
    cdef Py_ssize_t g, i, j
    cdef double m, s, v
    for g in range(n_group):
        for i in range(n_q):
            m = -INFINITY
            for j in range(n_k):
                if mask[i, j] and scores[g, i, j] > m:
                    m = scores[g, i, j]
            if m == -INFINITY:
                # Fully masked row: defined as all-zero probabilities.
                for j in range(n_k):
                    out[g, i, j] = 0
                continue
            s = 0
            for j in range(n_k):
                if mask[i, j]:
                    v = exp(scores[g, i, j] - m)
                    out[g, i, j] = <floating> v
                    s += v
                else:
                    out[g, i, j] = 0
            for j in range(n_k):
                out[g, i, j] = <floating> (out[g, i, j] / s)


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.cdivision(True)
cdef void _softmax_backward_2d(
    floating[:, ::1] probs,
    floating[:, ::1] dprobs,
    floating[:, ::1] out,
) noexcept nogil:
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t k = probs.shape[1]
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        dot = 0
        for j in range(k):
            dot += probs[i, j] * dprobs[i, j]
        for j in range(k):
            out[i, j] = <floating> (probs[i, j] * (dprobs[i, j] - dot))


def masked_softmax(scores, mask):
    """Row-wise softmax over the entries where mask is true.

    Same contract as maskdiff.kernels.reference.masked_softmax.
    """
    scores = np.ascontiguousarray(scores)
    if scores.dtype not in (np.float32, np.float64):
        raise TypeError(f"scores must be float32 or float64, got {scores.dtype}")
    if scores.ndim < 2:
        raise ValueError("scores must have at least 2 dimensions")
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if mask.shape != scores.shape[-2:]:
        raise ValueError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    shape = scores.shape
    flat = scores.reshape(-1, shape[-2], shape[-1])
    out = np.empty_like(flat)
    if scores.dtype == np.float32:
        _masked_softmax_3d[float](flat, mask, out)
    else:
        _masked_softmax_3d[double](flat, mask, out)
    return out.reshape(shape)


def softmax_backward(probs, dprobs):
    """Gradient of row-wise softmax given its output.

    Same contract as maskdiff.kernels.reference.softmax_backward.
    """
    probs = np.ascontiguousarray(probs)
    dprobs = np.ascontiguousarray(dprobs)
    if probs.shape != dprobs.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {dprobs.shape}")
    if probs.dtype != dprobs.dtype:
        dprobs = dprobs.astype(probs.dtype)
    if probs.dtype not in (np.float32, np.float64):
        raise TypeError(f"probs must be float32 or float64, got {probs.dtype}")
    shape = probs.shape
    flat_p = probs.reshape(-1, shape[-1])
    flat_d = dprobs.reshape(-1, shape[-1])
    out = np.empty_like(flat_p)
    if probs.dtype == np.float32:
        _softmax_backward_2d[float](flat_p, flat_d, out)
    else:
        _softmax_backward_2d[double](flat_p, flat_d, out)
    return out.reshape(shape)
