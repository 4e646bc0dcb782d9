"""Convolution front-end with selectable compute backend.

Two interchangeable backends implement the kernels:

* ``numba``  - @njit kernels (default when numba imports cleanly)
* ``numpy``  - vectorized per-tap BLAS formulation

Selection happens once at import via the ``TINYPPG_BACKEND`` environment
variable (``numba``, ``numpy`` or ``auto``). ``benchmarks/bench_backends.py``
times the two against each other.

Convention: cross-correlation (no kernel flip), "same" zero padding with the
extra zero on the right for even effective extents, output length equals
input length. Effective kernel extent is dilation * (k - 1) + 1; padding is
implicit (taps read only their valid input range).
"""

import os

import numpy as np

from .errors import ConfigError, ShapeError


def _select_backend():
    choice = os.environ.get("TINYPPG_BACKEND", "auto").lower()
    if choice in ("numpy", "np"):
        from . import _kernels_numpy as impl
        return impl, "numpy"
    if choice == "numba":
        from . import _kernels_numba as impl
        return impl, "numba"
    if choice != "auto":
        raise ConfigError(f"unknown TINYPPG_BACKEND {choice!r}, expected numba|numpy|auto")
    try:
        from . import _kernels_numba as impl
        return impl, "numba"
    except ImportError:
        from . import _kernels_numpy as impl
        return impl, "numpy"


_impl, _backend_name = _select_backend()


def backend() -> str:
    """Name of the active kernel backend ("numba" or "numpy")."""
    return _backend_name


def pad_amounts(kernel_size: int, dilation: int) -> tuple[int, int]:
    """(left, right) zero padding for "same" output length."""
    ext = dilation * (kernel_size - 1) + 1
    left = (ext - 1) // 2
    return left, ext - 1 - left


def _check_conv(x, w, dilation, depthwise):
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    wdim = 2 if depthwise else 3
    if x.ndim != 3 or w.ndim != wdim:
        raise ShapeError(f"expected 3-d input and {wdim}-d weights, got {x.shape} and {w.shape}")
    in_ch = w.shape[0] if depthwise else w.shape[1]
    if x.shape[1] != in_ch:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, weights expect {in_ch}")


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int = 1) -> np.ndarray:
    """Standard 1-D convolution. x: (N, Ci, L), w: (Co, Ci, K), b: (Co,)."""
    _check_conv(x, w, dilation, depthwise=False)
    left, _ = pad_amounts(w.shape[2], dilation)
    return _impl.conv1d_fwd(x, w, b, dilation, left)


def conv1d_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray, dilation: int = 1):
    """Gradients of conv1d_forward. Returns (gx, gw, gb)."""
    if gy.shape[1] != w.shape[0]:
        raise ShapeError(f"backward channel mismatch: grad has {gy.shape[1]}, "
                         f"weights produce {w.shape[0]}")
    left, _ = pad_amounts(w.shape[2], dilation)
    return _impl.conv1d_bwd(x, w, dilation, left, gy)


def depthwise_conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int = 1) -> np.ndarray:
    """Per-channel 1-D convolution. x: (N, C, L), w: (C, K), b: (C,)."""
    _check_conv(x, w, dilation, depthwise=True)
    left, _ = pad_amounts(w.shape[1], dilation)
    return _impl.dwconv1d_fwd(x, w, b, dilation, left)


def depthwise_conv1d_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray, dilation: int = 1):
    """Gradients of depthwise_conv1d_forward. Returns (gx, gw, gb)."""
    if gy.shape[1] != w.shape[0]:
        raise ShapeError(f"backward channel mismatch: grad has {gy.shape[1]}, "
                         f"weights have {w.shape[0]}")
    left, _ = pad_amounts(w.shape[1], dilation)
    return _impl.dwconv1d_bwd(x, w, dilation, left, gy)


def conv1d_forward_single(x, w, b, dilation, left, out, tmp):
    """Single-window conv with implicit zero padding, writing into `out`.

    Used by the streaming runtime so a window runs without allocating;
    `tmp` is a caller-owned accumulation scratch of at least `out`'s size.
    """
    _impl.conv1d_fwd_single(x, w, b, dilation, left, out, tmp)


def depthwise_conv1d_forward_single(x, w, b, dilation, left, out, tmp):
    """Single-window depthwise conv with implicit zero padding into `out`."""
    _impl.dwconv1d_fwd_single(x, w, b, dilation, left, out, tmp)
