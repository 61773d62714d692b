"""Layer ops built on :mod:`catw.nn.tensor`: convolution, attention, adapters."""
from __future__ import annotations

import math

import numpy as np

from catw import _kernels
from catw.nn.tensor import (
    ShapeError,
    Tensor,
    _make,
    _needs,
    add,
    as_tensor,
    matmul,
    reshape,
    softmax,
    square,
    transpose,
)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, OIkk weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got ndim={x.ndim}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be O x I x k x k, got ndim={weight.ndim}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernel must be square, got {kh}x{kw}")
    if ci != c:
        raise ShapeError(f"conv2d in_channels: input has {c}, weight expects {ci}")
    k = kh
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d spatial size {h}x{w} too small for kernel {k} with padding {padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = _kernels.im2col(x.data, k, stride, padding)  # (c*k*k, n*ho*wo)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}")
        out += bias.data[:, None]
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gx = _kernels.col2im(wmat.T @ g2, x.shape, k, stride, padding) if _needs(x) else None
        gw = (g2 @ cols.T).reshape(weight.shape) if _needs(weight) else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return _make(out, parents, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw)


def adapted_matmul(x, base, down, up) -> Tensor:
    """``x @ base^T + (x @ down^T) @ up^T`` for row vectors ``x`` of length k.

    ``base`` is d x k, ``down`` (A) is r x k, ``up`` (B) is d x r.  The low-rank
    path never forms the d x k product, so its cost is r*(d + k) per row.
    """
    x, base, down, up = map(as_tensor, (x, base, down, up))
    d, k = base.shape
    r = down.shape[0]
    if down.shape != (r, k) or up.shape != (d, r):
        raise ShapeError(f"adapter factors {up.shape} x {down.shape} do not compose to {base.shape}")
    return add(matmul(x, transpose(base, (1, 0))), matmul(matmul(x, transpose(down, (1, 0))), transpose(up, (1, 0))))


def attention(x, wq, wk, wv, wo) -> Tensor:
    """Single-head self-attention over the H*W positions, residual included."""
    x, wq, wk, wv, wo = map(as_tensor, (x, wq, wk, wv, wo))
    n, c, h, w = x.shape
    for label, m in (("Wq", wq), ("Wk", wk), ("Wv", wv), ("Wo", wo)):
        if tuple(m.shape) != (c, c):
            raise ShapeError(f"attention projection {label} must be {c}x{c}, got {tuple(m.shape)}")
    seq = transpose(reshape(x, (n, c, h * w)), (0, 2, 1))  # n, L, c
    q = matmul(seq, transpose(wq, (1, 0)))
    k = matmul(seq, transpose(wk, (1, 0)))
    v = matmul(seq, transpose(wv, (1, 0)))
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(c))
    att = matmul(softmax(scores, axis=-1), v)
    proj = matmul(att, transpose(wo, (1, 0)))
    return add(x, reshape(transpose(proj, (0, 2, 1)), (n, c, h, w)))


def linear(x, weight, bias=None) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    out = matmul(x, transpose(weight, (1, 0)))
    return add(out, bias) if bias is not None else out


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(dtype)


def mse(a, b) -> Tensor:
    """Mean squared error, mean-reduced over every element."""
    return square(as_tensor(a) - as_tensor(b)).mean()
