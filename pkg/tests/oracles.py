"""Brute-force reference implementations used to check the engine.

Everything here is written as plain nested loops over scalars, on
purpose: none of these share code or vectorization strategy with the
package, so agreement is meaningful. Keep shapes small when calling.
"""

from fractions import Fraction

import numpy as np


def conv2d_naive(x, kernel, bias=None, stride=1, padding=1):
    """Direct 6-loop convolution. x: (N,C,H,W), kernel: (O,C,K,K)."""
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (
                                    xp[ni, ci, i * stride + ki, j * stride + kj]
                                    * kernel[oi, ci, ki, kj]
                                )
                    if bias is not None:
                        acc += bias[oi]
                    out[ni, oi, i, j] = acc
    return out


def depthwise_conv2d_naive(x, kernel, bias=None, stride=1, padding=1):
    """Channel-by-channel convolution. kernel: (C,1,K,K)."""
    n, c, h, w = x.shape
    k = kernel.shape[2]
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ki in range(k):
                        for kj in range(k):
                            acc += (
                                xp[ni, ci, i * stride + ki, j * stride + kj]
                                * kernel[ci, 0, ki, kj]
                            )
                    if bias is not None:
                        acc += bias[ci]
                    out[ni, ci, i, j] = acc
    return out


def transposed_conv2d_naive(x, kernel, bias=None):
    """Explicit scatter loop for the stride-2 K=3 transposed convolution.

    Output cell (2i - 1 + ki, 2j - 1 + kj) accumulates x[i, j] * W[ki, kj];
    output is exactly (2H, 2W). kernel: (O,C,3,3).
    """
    n, c, h, w = x.shape
    o = kernel.shape[0]
    out = np.zeros((n, o, 2 * h, 2 * w), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for oi in range(o):
                for i in range(h):
                    for j in range(w):
                        for ki in range(3):
                            for kj in range(3):
                                ti = 2 * i - 1 + ki
                                tj = 2 * j - 1 + kj
                                if 0 <= ti < 2 * h and 0 <= tj < 2 * w:
                                    out[ni, oi, ti, tj] += (
                                        x[ni, ci, i, j] * kernel[oi, ci, ki, kj]
                                    )
    if bias is not None:
        for oi in range(o):
            out[:, oi] += bias[oi]
    return out


def maxpool2d_naive(x):
    """Exhaustive 2x2/stride-2 window scan."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    m = x[ni, ci, 2 * i, 2 * j]
                    for di in range(2):
                        for dj in range(2):
                            v = x[ni, ci, 2 * i + di, 2 * j + dj]
                            if v > m:
                                m = v
                    out[ni, ci, i, j] = m
    return out


def batchnorm_infer_naive(x, gamma, beta, mean, var, eps):
    """Scalar normalization formula applied elementwise."""
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    out[ni, ci, i, j] = (
                        (x[ni, ci, i, j] - mean[ci]) * gamma[ci] / np.sqrt(var[ci] + eps)
                        + beta[ci]
                    )
    return out


def softmax_channels_naive(x):
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                logits = x[ni, :, i, j].astype(np.float64)
                e = np.exp(logits - logits.max())
                out[ni, :, i, j] = e / e.sum()
    return out


def cross_entropy_naive(logits, labels):
    """Mean per-pixel negative log softmax probability of the true class."""
    n, c, h, w = logits.shape
    total = 0.0
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                z = logits[ni, :, i, j].astype(np.float64)
                m = z.max()
                lse = m + np.log(np.exp(z - m).sum())
                total += lse - z[labels[ni, i, j]]
    return total / (n * h * w)


def l1_norm_exact(values) -> float:
    """Sum of absolute values through exact rational arithmetic."""
    acc = Fraction(0)
    for v in np.asarray(values, dtype=np.float64).ravel().tolist():
        acc += Fraction(abs(v))
    return float(acc)


def finite_difference_gradient(f, param_data, coords, h):
    """Central finite differences of scalar f() w.r.t. selected coordinates
    of the in-place mutable array param_data. Returns {coord: estimate}."""
    est = {}
    for idx in coords:
        orig = param_data[idx]
        param_data[idx] = orig + h
        f_plus = f()
        param_data[idx] = orig - h
        f_minus = f()
        param_data[idx] = orig
        est[idx] = (f_plus - f_minus) / (2.0 * h)
    return est
