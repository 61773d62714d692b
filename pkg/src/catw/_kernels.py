"""Hot loops for convolution lowering (im2col / col2im) and separable blur.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature.  The numba path is used when numba imports and the env flag
``CATW_NUMBA`` is not set to ``0``.  Both paths produce identical results up
to float summation order (col2im accumulates in the same order in both).
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get("CATW_NUMBA", "1") != "0"


# --------------------------------------------------------------------- numpy


def im2col_numpy(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (C*k*k, N*Ho*Wo); rows ordered (c, i, j), columns (n, ho, wo)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def col2im_numpy(cols: np.ndarray, shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col_numpy`: scatter-add columns back onto the image."""
    n, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols6 = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(out)


def blur_numpy(x: np.ndarray, kernel1d: np.ndarray) -> np.ndarray:
    """Separable 2-D filter over the last two axes with reflect padding."""
    r = len(kernel1d) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    xp = np.pad(x, pad, mode="reflect")
    tmp = np.zeros(xp.shape[:-1] + (x.shape[-1],), dtype=np.float64)
    for j, wgt in enumerate(kernel1d):
        tmp += wgt * xp[..., j : j + x.shape[-1]]
    out = np.zeros(x.shape, dtype=np.float64)
    for i, wgt in enumerate(kernel1d):
        out += wgt * tmp[..., i : i + x.shape[-2], :]
    return out


# --------------------------------------------------------------------- numba

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _im2col_nb(x, k, stride, padding):
        n, c, h, w = x.shape
        ho = (h + 2 * padding - k) // stride + 1
        wo = (w + 2 * padding - k) // stride + 1
        cols = np.zeros((c * k * k, n * ho * wo), dtype=x.dtype)
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    r = (ch * k + i) * k + j
                    for b in range(n):
                        for oy in range(ho):
                            iy = oy * stride + i - padding
                            if iy < 0 or iy >= h:
                                continue
                            base = (b * ho + oy) * wo
                            for ox in range(wo):
                                ix = ox * stride + j - padding
                                if ix >= 0 and ix < w:
                                    cols[r, base + ox] = x[b, ch, iy, ix]
        return cols

    @njit(cache=True, nogil=True)
    def _col2im_nb(cols, n, c, h, w, k, stride, padding):
        ho = (h + 2 * padding - k) // stride + 1
        wo = (w + 2 * padding - k) // stride + 1
        out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
        # (i, j)-outer accumulation order matches the numpy path bit for bit
        for i in range(k):
            for j in range(k):
                for b in range(n):
                    for ch in range(c):
                        r = (ch * k + i) * k + j
                        for oy in range(ho):
                            base = (b * ho + oy) * wo
                            for ox in range(wo):
                                out[b, ch, oy * stride + i, ox * stride + j] += cols[r, base + ox]
        return out[:, :, padding : padding + h, padding : padding + w].copy()

    @njit(cache=True, nogil=True)
    def _blur_nb(x, kernel1d):
        # x: (M, H, W) float64
        m, h, w = x.shape
        r = kernel1d.shape[0] // 2
        tmp = np.zeros((m, h, w))
        out = np.zeros((m, h, w))
        for p in range(m):
            for y in range(h):
                for xx in range(w):
                    acc = 0.0
                    for j in range(kernel1d.shape[0]):
                        ix = xx + j - r
                        if ix < 0:
                            ix = -ix
                        elif ix >= w:
                            ix = 2 * (w - 1) - ix
                        acc += kernel1d[j] * x[p, y, ix]
                    tmp[p, y, xx] = acc
            for y in range(h):
                for xx in range(w):
                    acc = 0.0
                    for i in range(kernel1d.shape[0]):
                        iy = y + i - r
                        if iy < 0:
                            iy = -iy
                        elif iy >= h:
                            iy = 2 * (h - 1) - iy
                        acc += kernel1d[i] * tmp[p, iy, xx]
                    out[p, y, xx] = acc
        return out


# ------------------------------------------------------------------ dispatch


def im2col(x: np.ndarray, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    if numba_enabled():
        return _im2col_nb(np.ascontiguousarray(x), k, stride, padding)
    return im2col_numpy(x, k, stride, padding)


def col2im(cols: np.ndarray, shape: tuple, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    if numba_enabled():
        n, c, h, w = shape
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, k, stride, padding)
    return col2im_numpy(cols, shape, k, stride, padding)


def blur(x: np.ndarray, kernel1d: np.ndarray) -> np.ndarray:
    """Separable reflect-padded filter over the trailing (H, W) axes, in float64."""
    x = np.asarray(x, dtype=np.float64)
    kernel1d = np.asarray(kernel1d, dtype=np.float64)
    if numba_enabled():
        lead = x.shape[:-2]
        flat = np.ascontiguousarray(x.reshape((-1,) + x.shape[-2:]))
        return _blur_nb(flat, kernel1d).reshape(lead + x.shape[-2:])
    return blur_numpy(x, kernel1d)
