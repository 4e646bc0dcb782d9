"""Layers with explicit forward/backward passes.

Activations flow as numpy arrays of shape (batch, channels, length).
Each layer keeps whatever it needs from the forward pass to run the
backward pass; training is single-writer, so the caches live on the
layer objects. Parameters and their gradient buffers are exposed via
``params()`` for the optimizer.
"""

import numpy as np

from . import kernels
from .errors import InputError, ShapeError


class Conv1d:
    """Standard 1-D convolution, "same" zero padding, cross-correlation."""

    def __init__(self, in_channels, out_channels, kernel_size, dilation=1,
                 rng=None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.dilation = dilation
        bound = np.sqrt(1.0 / (in_channels * kernel_size))
        if rng is None:
            w = np.zeros((out_channels, in_channels, kernel_size))
        else:
            w = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size))
        self.w = w.astype(dtype)
        self.b = np.zeros(out_channels, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, training=False):
        if training:
            self._x = x
        return kernels.conv1d_forward(x, self.w, self.b, self.dilation)

    def backward(self, gy):
        gx, gw, gb = kernels.conv1d_backward(self._x, self.w, gy, self.dilation)
        self.gw += gw
        self.gb += gb
        return gx

    def params(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]


class DepthwiseConv1d:
    """Per-channel temporal convolution; channel c of the output sees only channel c."""

    def __init__(self, channels, kernel_size, dilation=1, rng=None, dtype=np.float32):
        self.channels = channels
        self.kernel_size = kernel_size
        self.dilation = dilation
        bound = np.sqrt(1.0 / kernel_size)
        if rng is None:
            w = np.zeros((channels, kernel_size))
        else:
            w = rng.uniform(-bound, bound, size=(channels, kernel_size))
        self.w = w.astype(dtype)
        self.b = np.zeros(channels, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, training=False):
        if training:
            self._x = x
        return kernels.depthwise_conv1d_forward(x, self.w, self.b, self.dilation)

    def backward(self, gy):
        gx, gw, gb = kernels.depthwise_conv1d_backward(self._x, self.w, gy, self.dilation)
        self.gw += gw
        self.gb += gb
        return gx

    def params(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]


class BatchNorm1d:
    """Per-channel batch normalization over (batch, length).

    Train mode normalizes by biased batch statistics and updates the running
    stats with the unbiased variance (the convention most frameworks use, so
    saved models behave identically). Eval mode uses running stats only.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self._cache = None

    def forward(self, x, training=False):
        if training:
            if x.shape[0] == 0:
                raise InputError("batchnorm needs a non-empty batch in train mode")
            m = x.shape[0] * x.shape[2]
            mean = x.mean(axis=(0, 2))
            xhat = x - mean[None, :, None]
            var = np.einsum("ncl,ncl->c", xhat, xhat) / m
            unbiased = var * (m / (m - 1)) if m > 1 else var
            self.running_mean += self.momentum * (mean - self.running_mean).astype(self.running_mean.dtype)
            self.running_var += self.momentum * (unbiased - self.running_var).astype(self.running_var.dtype)
            invstd = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
            xhat *= invstd[None, :, None]
        else:
            invstd = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype)
            xhat = (x - self.running_mean[None, :, None]) * invstd[None, :, None]
        self._cache = (xhat, invstd, training)
        y = xhat * self.gamma[None, :, None]
        y += self.beta[None, :, None]
        return y

    def backward(self, gy):
        xhat, invstd, trained = self._cache
        self.ggamma += np.einsum("ncl,ncl->c", gy, xhat)
        self.gbeta += gy.sum(axis=(0, 2))
        if not trained:
            return gy * (self.gamma * invstd)[None, :, None]
        m = gy.shape[0] * gy.shape[2]
        gxhat = gy * self.gamma[None, :, None]
        mean_g = gxhat.mean(axis=(0, 2))
        mean_gx = np.einsum("ncl,ncl->c", gxhat, xhat) / m
        gxhat -= mean_g[None, :, None]
        xhat *= mean_gx[None, :, None]  # cache is consumed by this backward
        gxhat -= xhat
        gxhat *= invstd[None, :, None]
        return gxhat

    def params(self):
        return [("gamma", self.gamma, self.ggamma), ("beta", self.beta, self.gbeta)]


class MaxPool1d:
    """Window 2, stride 2. Ties resolve to the earlier position."""

    def __init__(self):
        self._right_wins = None
        self._shape = None

    def forward(self, x, training=False):
        n, c, L = x.shape
        if L % 2 != 0:
            raise ShapeError(f"maxpool needs an even length, got {L}")
        left = x[:, :, 0::2]
        right = x[:, :, 1::2]
        if training:
            self._right_wins = right > left  # tie keeps the earlier position
            self._shape = x.shape
        return np.maximum(left, right)

    def backward(self, gy):
        n, c, L = self._shape
        gx = np.zeros((n, c, L // 2, 2), dtype=gy.dtype)
        right = self._right_wins
        np.multiply(gy, right, out=gx[:, :, :, 1])
        np.multiply(gy, ~right, out=gx[:, :, :, 0])
        return gx.reshape(n, c, L)

    @property
    def indices(self):
        """Absolute argmax positions from the last training-mode forward."""
        n, c, L = self._shape
        base = np.arange(0, L, 2, dtype=np.int64)
        return base[None, None, :] + self._right_wins.astype(np.int64)

    def params(self):
        return []


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x, training=False):
        if training:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, gy):
        return gy * self._mask

    def params(self):
        return []


class Sigmoid:
    def __init__(self):
        self._y = None

    def forward(self, x, training=False):
        y = 1.0 / (1.0 + np.exp(-x))
        self._y = y
        return y

    def backward(self, gy):
        y = self._y
        return gy * y * (1.0 - y)

    def params(self):
        return []


class UpsampleNearest:
    """Repeat every sample `factor` times along the length axis."""

    def __init__(self, factor):
        if factor < 1 or int(factor) != factor:
            raise ShapeError(f"upsample factor must be a positive integer, got {factor}")
        self.factor = int(factor)

    def forward(self, x, training=False):
        return np.repeat(x, self.factor, axis=2)

    def backward(self, gy):
        n, c, L = gy.shape
        return gy.reshape(n, c, L // self.factor, self.factor).sum(axis=3)

    def params(self):
        return []
