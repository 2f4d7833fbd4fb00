"""numpy implementations of the compiled degradation loops."""
import numpy as np


def valid_conv2d(padded, kernel):
    padded = np.ascontiguousarray(padded, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    C, PH, PW = padded.shape
    H, W = PH - kh + 1, PW - kw + 1
    if H < 1 or W < 1:
        raise ValueError("kernel larger than padded input")
    out = np.zeros((C, H, W), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            out += kernel[u, v] * padded[:, u : u + H, v : v + W]
    return out


def resample_last(rows, idx, weights):
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if idx.shape != weights.shape:
        raise ValueError("index/weight tables disagree")
    if idx.size and (idx.min() < 0 or idx.max() >= rows.shape[1]):
        raise IndexError("tap index out of range")
    out = np.zeros((rows.shape[0], idx.shape[0]), dtype=np.float64)
    for t in range(idx.shape[1]):
        out += weights[:, t] * rows[:, idx[:, t]]
    return out
