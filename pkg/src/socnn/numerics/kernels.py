"""Compiled inner loops for the neighbourhood reductions.

Both loops walk the (rows x k) neighbour table once; numpy versions of the
same work need an (rows x k x C) gathered copy plus a strided argmax.
"""
from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def neighbor_extrema(p, nb, take_max):
    """Per row r and channel c, the max (or min, where ``take_max[c]`` is
    false) of ``p[nb[r, j], c]`` over j, plus the source row of the first
    slot attaining it."""
    R, k = nb.shape
    C = p.shape[1]
    sel = np.empty((R, C), p.dtype)
    src = np.empty((R, C), np.int64)
    for r in range(R):
        j0 = nb[r, 0]
        for c in range(C):
            sel[r, c] = p[j0, c]
            src[r, c] = j0
        for j in range(1, k):
            row = nb[r, j]
            for c in range(C):
                v = p[row, c]
                if take_max[c]:
                    if v > sel[r, c]:
                        sel[r, c] = v
                        src[r, c] = row
                elif v < sel[r, c]:
                    sel[r, c] = v
                    src[r, c] = row
    return sel, src


@numba.njit(cache=True, nogil=True)
def scatter_columns(src, w, rows):
    """``out[src[r, c], c] += w[r, c]`` accumulated in row order."""
    out = np.zeros((rows, w.shape[1]), w.dtype)
    for r in range(w.shape[0]):
        for c in range(w.shape[1]):
            out[src[r, c], c] += w[r, c]
    return out


@numba.njit(cache=True, nogil=True)
def channel_moments(x):
    """Per-column mean and biased variance of a 2-D array (two passes, float64 sums)."""
    M, C = x.shape
    mean = np.zeros(C)
    for m in range(M):
        for c in range(C):
            mean[c] += x[m, c]
    mean /= M
    var = np.zeros(C)
    for m in range(M):
        for c in range(C):
            d = x[m, c] - mean[c]
            var[c] += d * d
    var /= M
    return mean, var


@numba.njit(cache=True, nogil=True)
def bn_leaky_forward(x, shift, scale, beta, slope):
    """``leaky((x - shift) * scale + beta)`` with per-column shift and scale."""
    M, C = x.shape
    out = np.empty_like(x)
    for m in range(M):
        for c in range(C):
            v = (x[m, c] - shift[c]) * scale[c] + beta[c]
            out[m, c] = v if v > 0 else slope * v
    return out


@numba.njit(cache=True, nogil=True)
def bn_leaky_backward(g, x, mean, inv_std, gamma, beta, slope, training):
    """Gradients of ``leaky(gamma * (x - mean) * inv_std + beta)``.

    In training mode ``mean`` and ``inv_std`` are the batch statistics and
    their dependence on ``x`` is included.
    """
    M, C = x.shape
    sum_d = np.zeros(C)
    sum_dxh = np.zeros(C)
    for m in range(M):
        for c in range(C):
            xh = (x[m, c] - mean[c]) * inv_std[c]
            d = g[m, c] if xh * gamma[c] + beta[c] > 0 else slope * g[m, c]
            sum_d[c] += d
            sum_dxh[c] += d * xh
    dx = np.empty_like(x)
    for m in range(M):
        for c in range(C):
            xh = (x[m, c] - mean[c]) * inv_std[c]
            d = g[m, c] if xh * gamma[c] + beta[c] > 0 else slope * g[m, c]
            if training:
                d = d - sum_d[c] / M - xh * sum_dxh[c] / M
            dx[m, c] = gamma[c] * inv_std[c] * d
    return dx, sum_dxh, sum_d


@numba.njit(cache=True, nogil=True)
def smallest_k(d, k):
    """Column indices of the k smallest entries of each row of ``d``, ordered
    by (value, index); a row's diagonal entry is always first."""
    R, N = d.shape
    out = np.empty((R, k), np.int64)
    best = np.empty(k, d.dtype)
    for r in range(R):
        self_col = r % N
        out[r, 0] = self_col
        filled = 1
        for col in range(N):
            if col == self_col:
                continue
            v = d[r, col]
            if filled == k:
                # scanning in index order, so an equal value never displaces
                if k == 1 or not v < best[k - 1]:
                    continue
                pos = k - 1
            else:
                pos = filled
                filled += 1
            while pos > 1 and v < best[pos - 1]:
                best[pos] = best[pos - 1]
                out[r, pos] = out[r, pos - 1]
                pos -= 1
            best[pos] = v
            out[r, pos] = col
    return out
