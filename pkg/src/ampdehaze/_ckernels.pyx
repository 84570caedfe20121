# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for patch extraction, scatter-add and window minima."""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

ctypedef fused real_t:
    float
    double


def im2col(real_t[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    dtype = np.float32 if real_t is float else np.float64
    out = np.empty((n, c * kh * kw, ho * wo), dtype=dtype)
    cdef real_t[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, y, x, row, base
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        if stride == 1:
                            # each output row is a contiguous slice of an input row
                            for y in range(ho):
                                memcpy(&cols[b, row, y * wo], &xp[b, ch, y + i, j], wo * sizeof(real_t))
                            continue
                        for y in range(ho):
                            base = y * wo
                            for x in range(wo):
                                cols[b, row, base + x] = xp[b, ch, y * stride + i, x * stride + j]
    return out


def col2im(real_t[:, :, ::1] cols, int c, int hp, int wp, int kh, int kw, int stride):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    dtype = np.float32 if real_t is float else np.float64
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real_t[:, :, :, ::1] xp = out
    cdef Py_ssize_t b, ch, i, j, y, x, row, base
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(ho):
                            base = y * wo
                            for x in range(wo):
                                xp[b, ch, y * stride + i, x * stride + j] += cols[b, row, base + x]
    return out


def min_filter2d(real_t[:, ::1] img, int size):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t r = size // 2
    dtype = np.float32 if real_t is float else np.float64
    tmp_arr = np.empty((h, w), dtype=dtype)
    out_arr = np.empty((h, w), dtype=dtype)
    cdef real_t[:, ::1] tmp = tmp_arr
    cdef real_t[:, ::1] out = out_arr
    cdef Py_ssize_t y, x, k, lo, hi
    cdef real_t m
    with nogil:
        for y in range(h):
            for x in range(w):
                lo = x - r
                hi = x + r
                if lo < 0:
                    lo = 0
                if hi > w - 1:
                    hi = w - 1
                m = img[y, lo]
                for k in range(lo + 1, hi + 1):
                    if img[y, k] < m:
                        m = img[y, k]
                tmp[y, x] = m
        for y in range(h):
            lo = y - r
            hi = y + r
            if lo < 0:
                lo = 0
            if hi > h - 1:
                hi = h - 1
            for x in range(w):
                m = tmp[lo, x]
                for k in range(lo + 1, hi + 1):
                    if tmp[k, x] < m:
                        m = tmp[k, x]
                out[y, x] = m
    return out_arr
