"""Finite-difference gradient checks for every registered op and loss.

A check builder takes a seeded ``Generator`` and returns ``(fn, inputs)``:
``fn`` maps a list of f64 leaf tensors to a scalar tensor.  :func:`grad_check`
compares backprop against central differences over every input entry.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from catw.nn import functional as F
from catw.nn.tensor import Tensor, sigmoid, silu, softmax

CHECKS: dict[str, Callable] = {}


def register(name: str):
    def deco(builder):
        CHECKS[name] = builder
        return builder

    return deco


def _load_all() -> None:
    # loss checks register themselves on import
    import catw.attacks  # noqa: F401
    import catw.autoencoder  # noqa: F401
    import catw.cat  # noqa: F401
    import catw.diffusion  # noqa: F401


def registered() -> list[str]:
    _load_all()
    return sorted(CHECKS)


# entries below this magnitude are compared absolutely: central differences at
# eps=1e-5 carry ~1e-10 roundoff on O(1) losses, which swamps tiny gradients
GRAD_FLOOR = 1e-6


def grad_check(op_name: str, seed: int = 0, eps: float = 1e-5) -> float:
    """Max over all inputs of |analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)."""
    _load_all()
    rng = np.random.default_rng(seed)
    fn, arrays = CHECKS[op_name](rng)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    fn(leaves).backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        numeric = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = fn([Tensor(a) for a in arrays]).item()
            flat[j] = orig - eps
            lo = fn([Tensor(a) for a in arrays]).item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (hi - lo) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRAD_FLOOR)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


# ------------------------------------------------------------------ layer checks


@register("conv2d")
def _conv(rng):
    proj = rng.normal(size=(2, 3, 3, 3))

    def fn(t):
        return (F.conv2d(t[0], t[1], t[2], stride=1, padding=1) * Tensor(proj)).sum()

    return fn, [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]


@register("conv2d_stride2")
def _conv_s2(rng):
    proj = rng.normal(size=(1, 2, 2, 2))

    def fn(t):
        return (F.conv2d(t[0], t[1], t[2], stride=2, padding=1) * Tensor(proj)).sum()

    return fn, [rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)]


@register("attention")
def _attention(rng):
    c = 3
    proj = rng.normal(size=(2, c, 2, 2))

    def fn(t):
        return (F.attention(t[0], t[1], t[2], t[3], t[4]) * Tensor(proj)).sum()

    return fn, [rng.normal(size=(2, c, 2, 2))] + [rng.normal(size=(c, c)) * 0.5 for _ in range(4)]


@register("adapted_matmul")
def _adapted(rng):
    d, k, r = 3, 4, 2
    proj = rng.normal(size=(5, d))

    def fn(t):
        return (F.adapted_matmul(t[0], t[1], t[2], t[3]) * Tensor(proj)).sum()

    # nonzero up-projection so both factors receive gradient
    return fn, [rng.normal(size=(5, k)), rng.normal(size=(d, k)), rng.normal(size=(r, k)), rng.normal(size=(d, r))]


@register("upsample2x")
def _up(rng):
    proj = rng.normal(size=(1, 2, 4, 4))
    return (lambda t: (F.upsample2x(t[0]) * Tensor(proj)).sum()), [rng.normal(size=(1, 2, 2, 2))]


@register("silu")
def _silu(rng):
    proj = rng.normal(size=(3, 4))
    return (lambda t: (silu(t[0]) * Tensor(proj)).sum()), [rng.normal(size=(3, 4)) * 2]


@register("sigmoid")
def _sigmoid(rng):
    proj = rng.normal(size=(3, 4))
    return (lambda t: (sigmoid(t[0]) * Tensor(proj)).sum()), [rng.normal(size=(3, 4)) * 2]


@register("softmax")
def _softmax(rng):
    proj = rng.normal(size=(3, 5))
    return (lambda t: (softmax(t[0], axis=-1) * Tensor(proj)).sum()), [rng.normal(size=(3, 5))]


@register("linear")
def _linear(rng):
    proj = rng.normal(size=(4, 3))
    return (lambda t: (F.linear(t[0], t[1], t[2]) * Tensor(proj)).sum()), [
        rng.normal(size=(4, 5)),
        rng.normal(size=(3, 5)),
        rng.normal(size=3),
    ]


@register("mse")
def _mse(rng):
    return (lambda t: F.mse(t[0], t[1])), [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))]
