"""Pure-numpy convolution kernels.

Inputs arrive unpadded together with the left pad amount; every tap
touches only its valid input range, so no padded copies are made.
Pointwise (k=1) convolutions collapse to batched BLAS matmuls; wide
dilated kernels with a single output channel (the pyramid branches) use
no-copy einsum reductions instead of tensordot's transposed copies.
"""

import numpy as np


def conv1d_fwd(x, w, b, dilation, left):
    n, ci, L = x.shape
    co, _, k = w.shape
    y = np.empty((n, co, L), dtype=x.dtype)
    y[:] = b[:, None]
    if k == 1 and dilation == 1:
        y += np.matmul(w[:, :, 0], x)
        return y
    for tap in range(k):
        s = tap * dilation - left
        lo = max(0, -s)
        hi = min(L, L - s)
        if hi <= lo:
            continue
        y[:, :, lo:hi] += np.matmul(w[:, :, tap], x[:, :, lo + s:hi + s])
    return y


def conv1d_bwd(x, w, dilation, left, gy):
    n, ci, L = x.shape
    co, _, k = w.shape
    gb = gy.sum(axis=(0, 2))
    if k == 1 and dilation == 1:
        gw = np.tensordot(gy, x, axes=([0, 2], [0, 2]))[:, :, None]
        gx = np.matmul(w[:, :, 0].T, gy)
        return gx, gw, gb
    gw = np.zeros_like(w)
    gx = np.zeros_like(x)
    for tap in range(k):
        s = tap * dilation - left
        lo = max(0, -s)
        hi = min(L, L - s)
        if hi <= lo:
            continue
        xs = x[:, :, lo + s:hi + s]
        gys = gy[:, :, lo:hi]
        if co == 1:
            gw[0, :, tap] = np.einsum("nt,nit->i", gys[:, 0, :], xs)
            gx[:, :, lo + s:hi + s] += w[0, :, tap][None, :, None] * gys
        else:
            gw[:, :, tap] = np.tensordot(gys, xs, axes=([0, 2], [0, 2]))
            gx[:, :, lo + s:hi + s] += np.matmul(w[:, :, tap].T, gys)
    return gx, gw, gb


def dwconv1d_fwd(x, w, b, dilation, left):
    n, c, L = x.shape
    k = w.shape[1]
    y = np.empty((n, c, L), dtype=x.dtype)
    y[:] = b[:, None]
    tmp = np.empty_like(y)
    for tap in range(k):
        s = tap * dilation - left
        lo = max(0, -s)
        hi = min(L, L - s)
        if hi <= lo:
            continue
        np.multiply(w[None, :, tap, None], x[:, :, lo + s:hi + s], out=tmp[:, :, lo:hi])
        y[:, :, lo:hi] += tmp[:, :, lo:hi]
    return y


def dwconv1d_bwd(x, w, dilation, left, gy):
    n, c, L = x.shape
    k = w.shape[1]
    gw = np.zeros_like(w)
    gx = np.zeros_like(x)
    gb = gy.sum(axis=(0, 2))
    for tap in range(k):
        s = tap * dilation - left
        lo = max(0, -s)
        hi = min(L, L - s)
        if hi <= lo:
            continue
        xs = x[:, :, lo + s:hi + s]
        gys = gy[:, :, lo:hi]
        gw[:, tap] = np.einsum("nct,nct->c", gys, xs)
        gx[:, :, lo + s:hi + s] += w[None, :, tap, None] * gys
    return gx, gw, gb


# -- single-window variants for the streaming runtime ------------------------
# Caller-provided output and accumulation buffers, so a window runs
# without allocating.

def conv1d_fwd_single(x, w, b, dilation, left, out, tmp):
    co, ci, k = w.shape
    L = x.shape[1]
    out[:] = b[:, None]
    for tap in range(k):
        s = tap * dilation - left
        lo = max(0, -s)
        hi = min(L, L - s)
        if hi <= lo:
            continue
        np.matmul(w[:, :, tap], x[:, lo + s:hi + s], out=tmp[:co, :hi - lo])
        out[:, lo:hi] += tmp[:co, :hi - lo]


def dwconv1d_fwd_single(x, w, b, dilation, left, out, tmp):
    c, k = w.shape
    L = x.shape[1]
    out[:] = b[:, None]
    for tap in range(k):
        s = tap * dilation - left
        lo = max(0, -s)
        hi = min(L, L - s)
        if hi <= lo:
            continue
        np.multiply(w[:, tap:tap + 1], x[:, lo + s:hi + s], out=tmp[:c, :hi - lo])
        out[:, lo:hi] += tmp[:c, :hi - lo]
