# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops of the degradation pipeline.

Both routines accumulate taps in the same order as the numpy fallback in
``_purepy`` so the two backends agree bit for bit.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def valid_conv2d(const double[:, :, ::1] padded, const double[:, ::1] kernel):
    """Valid-mode 2-D correlation of every channel of ``padded`` with ``kernel``."""
    cdef Py_ssize_t C = padded.shape[0]
    cdef Py_ssize_t kh = kernel.shape[0], kw = kernel.shape[1]
    cdef Py_ssize_t H = padded.shape[1] - kh + 1
    cdef Py_ssize_t W = padded.shape[2] - kw + 1
    if H < 1 or W < 1:
        raise ValueError("kernel larger than padded input")
    out = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t c, y, x, u, v
    cdef double acc
    with nogil:
        for c in range(C):
            for y in range(H):
                for x in range(W):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            acc = acc + kernel[u, v] * padded[c, y + u, x + v]
                    o[c, y, x] = acc
    return out


def resample_last(const double[:, ::1] rows, const cnp.int64_t[:, ::1] idx, const double[:, ::1] weights):
    """out[r, i] = sum_t weights[i, t] * rows[r, idx[i, t]]."""
    cdef Py_ssize_t R = rows.shape[0]
    cdef Py_ssize_t n_in = rows.shape[1]
    cdef Py_ssize_t n_out = idx.shape[0], taps = idx.shape[1]
    cdef Py_ssize_t r, i, t, j
    if weights.shape[0] != n_out or weights.shape[1] != taps:
        raise ValueError("index/weight tables disagree")
    for i in range(n_out):
        for t in range(taps):
            j = idx[i, t]
            if j < 0 or j >= n_in:
                raise IndexError("tap index out of range")
    out = np.zeros((R, n_out), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double acc
    with nogil:
        for r in range(R):
            for i in range(n_out):
                acc = 0.0
                for t in range(taps):
                    acc = acc + weights[i, t] * rows[r, idx[i, t]]
                o[r, i] = acc
    return out
