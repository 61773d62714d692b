"""Contrastive adversarial training (CAT) of low-rank adapters on the autoencoder.

Adapters go on every conv and attention projection of the selected halves;
only adapter factors are optimized, with the reconstruction error of the
protected images as the loss.  Gaussian filtering is provided as the
purification baseline.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from catw import _kernels
from catw.autoencoder import TrainingDiverged, decode, encode
from catw.nn import functional as F
from catw.nn.graph import Adam, AdapterError, ModelGraph, backward, matrix_dims
from catw.nn.gradcheck import register
from catw.nn.tensor import Tensor, as_tensor

log = logging.getLogger(__name__)

SETTINGS = ("both", "encoder_only", "decoder_only")
DEFAULT_RANK = {"both": 128, "encoder_only": 256, "decoder_only": 256}


@dataclass
class AdapterPlacement:
    setting: str = "both"
    rank: int | None = None
    targets: list[str] = field(default_factory=list)
    effective_ranks: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise AdapterError(f"unknown CAT setting {self.setting!r}; choose from {SETTINGS}")
        if self.rank is None:
            self.rank = DEFAULT_RANK[self.setting]
        if self.rank < 1:
            raise AdapterError("rank must be >= 1")

    @property
    def halves(self) -> tuple[str, ...]:
        return {"both": ("encoder.", "decoder."), "encoder_only": ("encoder.",), "decoder_only": ("decoder.",)}[self.setting]


@dataclass(frozen=True)
class CatHParams:
    batch: int = 4
    lr: float = 1e-4
    steps: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch < 1 or self.lr <= 0 or self.steps < 0 or self.eps <= 0:
            raise ValueError("CAT hyperparameters must be positive")


def resolve_targets(graph: ModelGraph, placement: AdapterPlacement) -> list[str]:
    targets = []
    for prefix in placement.halves:
        targets.extend(graph.adaptable_hosts(prefix))
    return targets


def attach_adapters(ae_graph: ModelGraph, placement: AdapterPlacement, seed: int = 0) -> ModelGraph:
    """Copy of ``ae_graph`` with one zero-initialized adapter per target, base frozen.

    Per-layer rank is ``min(rank, d, k)``; the toy layers are narrower than
    the nominal ranks, so the clamp is recorded in ``effective_ranks``.
    """
    if ae_graph.adapters:
        raise AdapterError("graph already carries adapters")
    g = ae_graph.clone()
    rng = np.random.default_rng([seed, 5])
    placement.targets = resolve_targets(g, placement)
    if not placement.targets:
        raise AdapterError(f"no adapter targets resolved for setting {placement.setting!r}")
    placement.effective_ranks = {}
    for host in placement.targets:
        d, k = matrix_dims(g[host].shape)
        r = min(placement.rank, d, k)
        g.attach_adapter(host, r, rng)
        placement.effective_ranks[host] = r
    g.config["cat"] = {"setting": placement.setting, "rank": placement.rank, "added_params": g.adapter_param_count()}
    log.info("attached %d adapters (%s, r=%d), %d params", len(placement.targets), placement.setting, placement.rank, g.adapter_param_count())
    return g


def cat_loss(graph, x_a) -> Tensor:
    """Mean squared reconstruction error of the protected batch through the adapted autoencoder.

    ``graph`` may also be any object with ``encode``/``decode`` methods (test stubs).
    """
    x_a = np.asarray(x_a.data if isinstance(x_a, Tensor) else x_a)
    if isinstance(graph, ModelGraph):
        return F.mse(decode(encode(x_a, graph), graph), x_a)
    return F.mse(as_tensor(graph.decode(graph.encode(Tensor(x_a)))), x_a)


def _has_prefix(graph: ModelGraph, prefix: str) -> bool:
    return any(h.startswith(prefix) for h in graph.adapters)


def train_cat(graph: ModelGraph, protected: np.ndarray, hparams: CatHParams = CatHParams(), seed: int = 0) -> tuple[ModelGraph, list[float]]:
    """Adam on adapter factors only; returns the graph (trained in place) and the loss curve."""
    if not graph.adapters:
        raise AdapterError("attach adapters before training")
    protected = np.asarray(protected, dtype=graph.dtype)
    if len(protected) == 0:
        raise ValueError("empty protected set")
    params = graph.adapter_params()
    opt = Adam(params, lr=hparams.lr, betas=hparams.betas, eps=hparams.eps)
    rng = np.random.default_rng([seed, 9])
    # frozen encoder: its latents never change, so compute them once
    cached_z = None if _has_prefix(graph, "encoder.") else encode(protected, graph).data
    curve: list[float] = []
    for step in range(hparams.steps):
        idx = rng.choice(len(protected), size=min(hparams.batch, len(protected)), replace=False)
        xb = protected[idx]
        z = Tensor(cached_z[idx]) if cached_z is not None else encode(xb, graph)
        loss = F.mse(decode(z, graph), xb)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        backward(loss, graph)
        opt.step()
        curve.append(value)
    return graph, curve


def detach(graph: ModelGraph) -> ModelGraph:
    return graph.detach()


def merge(graph: ModelGraph) -> ModelGraph:
    return graph.merge()


def gaussian_kernel(ksize: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Normalized 2-D kernel exp(-(dx^2 + dy^2) / 2 sigma^2) / Z."""
    k1 = gaussian_kernel1d(ksize, sigma)
    return np.outer(k1, k1)


def gaussian_kernel1d(ksize: int, sigma: float) -> np.ndarray:
    if ksize < 1 or ksize % 2 == 0:
        raise ValueError(f"ksize must be a positive odd integer, got {ksize}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    d = np.arange(ksize) - ksize // 2
    k = np.exp(-(d.astype(np.float64) ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_purify(x: np.ndarray, ksize: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Per-channel Gaussian blur with reflect padding, clamped to [0, 1]."""
    x = np.asarray(x)
    out = _kernels.blur(x, gaussian_kernel1d(ksize, sigma))
    return np.clip(out, 0.0, 1.0).astype(x.dtype if x.dtype in (np.float32, np.float64) else np.float32)


def adapter_counts(graph: ModelGraph) -> dict[str, int]:
    return {
        "encoder": sum(1 for h in graph.adapters if h.startswith("encoder.")),
        "decoder": sum(1 for h in graph.adapters if h.startswith("decoder.")),
    }


@register("cat_loss")
def _check_cat(rng):
    from catw.autoencoder import AutoencoderConfig, build_autoencoder

    base = build_autoencoder(AutoencoderConfig(image_size=8, base_channels=2, latent_channels=2), seed=6).astype(np.float64)
    g = attach_adapters(base, AdapterPlacement("both", rank=2), seed=1)
    hosts = ["encoder.down2.weight", "decoder.attn.wv"]
    for h in hosts:
        g.adapters[h].up.data = rng.normal(0, 0.1, size=g.adapters[h].up.shape)
    x_a = rng.uniform(0.1, 0.9, size=(2, 3, 8, 8))
    names = [(h, part) for h in hosts for part in ("down", "up")]

    def fn(t):
        h = g.clone()
        for (host, part), leaf in zip(names, t):
            setattr(h.adapters[host], part, leaf)
        return cat_loss(h, x_a)

    return fn, [getattr(g.adapters[h], p).data.copy() for h, p in names]
