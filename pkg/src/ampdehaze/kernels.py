"""Hot inner loops, backed by the compiled extension when it is importable.

Set ``AMPDEHAZE_PURE=1`` to force the numpy implementations.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col_numpy(xp, kh, kw, stride):
    """Patch matrix of shape (N, C*kh*kw, Ho*Wo) from an already padded input."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im_numpy(cols, c, hp, wp, kh, kw, stride):
    """Adjoint of :func:`im2col_numpy`: scatter-add columns back onto the padded grid."""
    n = cols.shape[0]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    blocks = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, i, j]
    return out


def min_filter2d_numpy(img, size):
    """Square-window minimum with replicated borders (separable)."""
    r = size // 2
    padded = np.pad(img, r, mode="edge")
    rows = sliding_window_view(padded, size, axis=1).min(axis=-1)
    return sliding_window_view(rows, size, axis=0).min(axis=-1)


_ext = None
if not os.environ.get("AMPDEHAZE_PURE"):
    try:
        from . import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "compiled" if _ext is not None else "numpy"


def _native(arr):
    return arr.dtype in (np.float32, np.float64)


def im2col(xp, kh, kw, stride):
    if _ext is not None and _native(xp):
        return _ext.im2col(np.ascontiguousarray(xp), kh, kw, stride)
    return im2col_numpy(xp, kh, kw, stride)


def col2im(cols, c, hp, wp, kh, kw, stride):
    if _ext is not None and _native(cols):
        return _ext.col2im(np.ascontiguousarray(cols), c, hp, wp, kh, kw, stride)
    return col2im_numpy(cols, c, hp, wp, kh, kw, stride)


def min_filter2d(img, size):
    if _ext is not None and _native(img):
        return _ext.min_filter2d(np.ascontiguousarray(img), size)
    return min_filter2d_numpy(img, size)
