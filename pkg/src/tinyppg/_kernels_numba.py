"""Numba-jitted convolution kernels.

Same contract as _kernels_numpy: unpadded input plus the left pad
amount, taps touch only their valid input range. Pointwise (k=1) convs
run as serial @njit loops over numba's BLAS binding (np.dot), which
OpenBLAS threads internally; putting np.dot inside parallel=True
functions would swap in numba's own much slower parallel matmul, so the
dispatch happens at Python level. Loop kernels use prange only across
outputs written by a single iteration, keeping results deterministic
(fastmath stays off).
"""

import numpy as np
from numba import njit, prange


@njit(cache=True)
def _conv_fwd_k1(x, w2, b):
    n, ci, L = x.shape
    co = w2.shape[0]
    y = np.empty((n, co, L), dtype=x.dtype)
    for bi in range(n):
        np.dot(w2, x[bi], out=y[bi])
        for o in range(co):
            y[bi, o, :] += b[o]
    return y


@njit(cache=True, parallel=True)
def _conv_fwd_gen(x, w, b, dilation, left):
    n, ci, L = x.shape
    co, _, k = w.shape
    y = np.empty((n, co, L), dtype=x.dtype)
    for bi in prange(n):
        for o in range(co):
            y[bi, o, :] = b[o]
            for i in range(ci):
                for tap in range(k):
                    s = tap * dilation - left
                    lo = max(0, -s)
                    hi = min(L, L - s)
                    if hi > lo:
                        y[bi, o, lo:hi] += w[o, i, tap] * x[bi, i, lo + s:hi + s]
    return y


def conv1d_fwd(x, w, b, dilation, left):
    if w.shape[2] == 1 and dilation == 1:
        return _conv_fwd_k1(x, np.ascontiguousarray(w[:, :, 0]), b)
    return _conv_fwd_gen(x, w, b, dilation, left)


@njit(cache=True)
def _conv_bwd_k1(x, w2, gy):
    n, ci, L = x.shape
    co = w2.shape[0]
    gb = np.zeros(co, dtype=w2.dtype)
    for bi in range(n):
        for o in range(co):
            gb[o] += np.sum(gy[bi, o, :])
    xt = np.empty((n, L, ci), dtype=x.dtype)
    for bi in range(n):
        xt[bi] = x[bi].T
    gw2 = np.zeros((co, ci), dtype=w2.dtype)
    tmp = np.empty((co, ci), dtype=w2.dtype)
    for bi in range(n):
        np.dot(gy[bi], xt[bi], out=tmp)
        gw2 += tmp
    gx = np.empty_like(x)
    w2t = np.ascontiguousarray(w2.T)
    for bi in range(n):
        np.dot(w2t, gy[bi], out=gx[bi])
    return gx, gw2.reshape(co, ci, 1), gb


@njit(cache=True, parallel=True)
def _conv_bwd_gen(x, w, dilation, left, gy):
    n, ci, L = x.shape
    co, _, k = w.shape
    gb = np.zeros(co, dtype=w.dtype)
    for o in prange(co):
        for bi in range(n):
            for t in range(L):
                gb[o] += gy[bi, o, t]
    gw = np.zeros_like(w)
    gx = np.zeros_like(x)
    for i in prange(ci):
        for o in range(co):
            for tap in range(k):
                s = tap * dilation - left
                lo = max(0, -s)
                hi = min(L, L - s)
                if hi > lo:
                    acc = gw[o, i, tap]
                    for bi in range(n):
                        acc += np.dot(gy[bi, o, lo:hi], x[bi, i, lo + s:hi + s])
                    gw[o, i, tap] = acc
    for bi in prange(n):
        for o in range(co):
            for i in range(ci):
                for tap in range(k):
                    s = tap * dilation - left
                    lo = max(0, -s)
                    hi = min(L, L - s)
                    if hi > lo:
                        gx[bi, i, lo + s:hi + s] += w[o, i, tap] * gy[bi, o, lo:hi]
    return gx, gw, gb


def conv1d_bwd(x, w, dilation, left, gy):
    if w.shape[2] == 1 and dilation == 1:
        return _conv_bwd_k1(x, np.ascontiguousarray(w[:, :, 0]), gy)
    return _conv_bwd_gen(x, w, dilation, left, gy)


@njit(cache=True, parallel=True)
def dwconv1d_fwd(x, w, b, dilation, left):
    n, c, L = x.shape
    k = w.shape[1]
    y = np.empty((n, c, L), dtype=x.dtype)
    for bi in prange(n):
        for ch in range(c):
            y[bi, ch, :] = b[ch]
            for tap in range(k):
                s = tap * dilation - left
                lo = max(0, -s)
                hi = min(L, L - s)
                if hi > lo:
                    y[bi, ch, lo:hi] += w[ch, tap] * x[bi, ch, lo + s:hi + s]
    return y


@njit(cache=True, parallel=True)
def dwconv1d_bwd(x, w, dilation, left, gy):
    n, c, L = x.shape
    k = w.shape[1]
    gw = np.zeros_like(w)
    gb = np.zeros(c, dtype=w.dtype)
    gx = np.zeros_like(x)
    for ct in prange(c * k):
        ch = ct // k
        tap = ct % k
        s = tap * dilation - left
        lo = max(0, -s)
        hi = min(L, L - s)
        acc = gw[ch, tap]
        for bi in range(n):
            if tap == 0:
                gb[ch] += np.sum(gy[bi, ch, :])
            if hi > lo:
                acc += np.dot(gy[bi, ch, lo:hi], x[bi, ch, lo + s:hi + s])
        gw[ch, tap] = acc
    for bi in prange(n):
        for ch in range(c):
            for tap in range(k):
                s = tap * dilation - left
                lo = max(0, -s)
                hi = min(L, L - s)
                if hi > lo:
                    gx[bi, ch, lo + s:hi + s] += w[ch, tap] * gy[bi, ch, lo:hi]
    return gx, gw, gb


@njit(cache=True)
def conv1d_fwd_single(x, w, b, dilation, left, out, tmp):
    co, ci, k = w.shape
    L = x.shape[1]
    for o in range(co):
        out[o, :] = b[o]
        for i in range(ci):
            for tap in range(k):
                s = tap * dilation - left
                lo = max(0, -s)
                hi = min(L, L - s)
                if hi > lo:
                    out[o, lo:hi] += w[o, i, tap] * x[i, lo + s:hi + s]


@njit(cache=True)
def dwconv1d_fwd_single(x, w, b, dilation, left, out, tmp):
    c, k = w.shape
    L = x.shape[1]
    for ch in range(c):
        out[ch, :] = b[ch]
        for tap in range(k):
            s = tap * dilation - left
            lo = max(0, -s)
            hi = min(L, L - s)
            if hi > lo:
                out[ch, lo:hi] += w[ch, tap] * x[ch, lo + s:hi + s]
