"""Miniature deterministic latent autoencoder: 32x32x3 images <-> 8x8x4 latents."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from catw.nn import functional as F
from catw.nn.graph import Adam, ModelGraph, backward
from catw.nn.gradcheck import register
from catw.nn.tensor import ShapeError, Tensor, as_tensor, sigmoid, silu

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step


@dataclass(frozen=True)
class AutoencoderConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    latent_channels: int = 4
    downsample_factor: int = 4
    attention_at_bottleneck: bool = True

    def __post_init__(self):
        if self.downsample_factor != 4:
            raise ValueError("the toy topology has exactly two stride-2 stages (downsample_factor=4)")
        if self.image_size % self.downsample_factor:
            raise ValueError(f"image_size {self.image_size} not divisible by {self.downsample_factor}")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample_factor

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_size, self.latent_size)


def _conv_params(rng, cin, cout, k=3, gain=1.0):
    std = gain / np.sqrt(cin * k * k)
    return {
        "weight": rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32),
        "bias": np.zeros(cout, dtype=np.float32),
    }


def _attn_params(rng, c):
    s = 1.0 / np.sqrt(c)
    return {name: rng.normal(0.0, s * g, size=(c, c)).astype(np.float32) for name, g in (("wq", 1.0), ("wk", 1.0), ("wv", 1.0), ("wo", 0.5))}


def build_autoencoder(cfg: AutoencoderConfig = AutoencoderConfig(), seed: int = 0) -> ModelGraph:
    """Widths C/2 at full resolution, C at 1/2, 2C at 1/4 (C = base_channels)."""
    rng = np.random.default_rng(seed)
    c0, c1, c2 = max(cfg.base_channels // 2, 1), cfg.base_channels, 2 * cfg.base_channels
    zc = cfg.latent_channels
    g = ModelGraph("autoencoder", {"ae": asdict(cfg), "latent_scale": 1.0})
    add = g.add_layer
    add("encoder.conv_in", "conv", _conv_params(rng, cfg.in_channels, c0))
    add("encoder.down1", "conv", _conv_params(rng, c0, c1), stride=2)
    add("encoder.mid1", "conv", _conv_params(rng, c1, c1))
    add("encoder.down2", "conv", _conv_params(rng, c1, c2), stride=2)
    add("encoder.res.conv1", "conv", _conv_params(rng, c2, c2))
    add("encoder.res.conv2", "conv", _conv_params(rng, c2, c2, gain=0.5))
    if cfg.attention_at_bottleneck:
        add("encoder.attn", "attention", _attn_params(rng, c2))
    add("encoder.conv_out", "conv", _conv_params(rng, c2, zc))
    add("decoder.conv_in", "conv", _conv_params(rng, zc, c2))
    add("decoder.res.conv1", "conv", _conv_params(rng, c2, c2))
    add("decoder.res.conv2", "conv", _conv_params(rng, c2, c2, gain=0.5))
    if cfg.attention_at_bottleneck:
        add("decoder.attn", "attention", _attn_params(rng, c2))
    add("decoder.up1", "conv", _conv_params(rng, c2, c1))
    add("decoder.mid1", "conv", _conv_params(rng, c1, c1))
    add("decoder.up2", "conv", _conv_params(rng, c1, c0))
    add("decoder.conv_out", "conv", _conv_params(rng, c0, cfg.in_channels))
    return g


def config_of(graph: ModelGraph) -> AutoencoderConfig:
    return AutoencoderConfig(**graph.config["ae"])


def _conv(g: ModelGraph, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = g.weight(name + ".weight")
    return F.conv2d(x, w, g[name + ".bias"], stride=stride, padding=w.shape[-1] // 2)


def _res(g: ModelGraph, name: str, x: Tensor) -> Tensor:
    h = _conv(g, name + ".conv1", silu(x))
    h = _conv(g, name + ".conv2", silu(h))
    return x + h


def _attn(g: ModelGraph, name: str, x: Tensor) -> Tensor:
    return F.attention(x, *(g.weight(f"{name}.{p}") for p in ("wq", "wk", "wv", "wo")))


def encode(x, graph: ModelGraph) -> Tensor:
    """Images (N, 3, S, S) in [0, 1] -> latents (N, 4, S/4, S/4)."""
    cfg = config_of(graph)
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"encode expects N x {cfg.in_channels} x {cfg.image_size} x {cfg.image_size}, got {x.shape}")
    h = _conv(graph, "encoder.conv_in", x * 2.0 - 1.0)
    h = _conv(graph, "encoder.down1", silu(h), stride=2)
    h = h + _conv(graph, "encoder.mid1", silu(h))
    h = _conv(graph, "encoder.down2", silu(h), stride=2)
    h = _res(graph, "encoder.res", h)
    if cfg.attention_at_bottleneck:
        h = _attn(graph, "encoder.attn", h)
    return _conv(graph, "encoder.conv_out", silu(h))


def decode(z, graph: ModelGraph) -> Tensor:
    """Latents -> images squashed into (0, 1)."""
    cfg = config_of(graph)
    z = as_tensor(z)
    if z.ndim != 4 or z.shape[1:] != cfg.latent_shape:
        raise ShapeError(f"decode expects N x {cfg.latent_shape}, got {z.shape}")
    h = _conv(graph, "decoder.conv_in", z)
    h = _res(graph, "decoder.res", h)
    if cfg.attention_at_bottleneck:
        h = _attn(graph, "decoder.attn", h)
    h = _conv(graph, "decoder.up1", F.upsample2x(silu(h)))
    h = h + _conv(graph, "decoder.mid1", silu(h))
    h = _conv(graph, "decoder.up2", F.upsample2x(silu(h)))
    return sigmoid(_conv(graph, "decoder.conv_out", silu(h)))


def reconstruct(x, graph: ModelGraph) -> Tensor:
    return decode(encode(x, graph), graph)


def encode_np(x: np.ndarray, graph: ModelGraph, batch: int = 32) -> np.ndarray:
    """Batched, gradient-free encode returning a plain array."""
    return np.concatenate([encode(x[i : i + batch], graph).data for i in range(0, len(x), batch)])


def decode_np(z: np.ndarray, graph: ModelGraph, batch: int = 32) -> np.ndarray:
    return np.concatenate([decode(z[i : i + batch], graph).data for i in range(0, len(z), batch)])


def reconstruction_mse(x: np.ndarray, graph: ModelGraph) -> np.ndarray:
    """Per-image mean squared reconstruction error."""
    rec = decode_np(encode_np(x, graph), graph)
    return ((rec - x) ** 2).reshape(len(x), -1).mean(axis=1)


def train_autoencoder(
    images: np.ndarray,
    cfg: AutoencoderConfig = AutoencoderConfig(),
    lr: float = 1e-3,
    batch: int = 8,
    steps: int = 3000,
    seed: int = 0,
    graph: ModelGraph | None = None,
) -> tuple[ModelGraph, list[float]]:
    """Pixel-MSE training with Adam; returns the graph and per-step losses."""
    if len(images) == 0:
        raise ValueError("empty training corpus")
    images = np.asarray(images, dtype=np.float32)
    graph = graph if graph is not None else build_autoencoder(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    opt = Adam(graph.trainable_params(), lr=lr)
    curve: list[float] = []
    for step in range(steps):
        idx = rng.choice(len(images), size=min(batch, len(images)), replace=False)
        xb = images[idx]
        loss = F.mse(reconstruct(xb, graph), xb)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        backward(loss, graph)
        opt.step()
        curve.append(value)
        if step % 500 == 0:
            log.info("ae step %d loss %.5f", step, value)
    if steps:
        graph.config["latent_scale"] = float(1.0 / max(encode_np(images, graph).std(), 1e-6))
    return graph, curve


@register("autoencoder_recon")
def _check_recon(rng):
    cfg = AutoencoderConfig(image_size=8, base_channels=2, latent_channels=2)
    g = build_autoencoder(cfg, seed=int(rng.integers(1 << 31))).astype(np.float64)
    x = rng.uniform(0, 1, size=(1, 3, 8, 8))
    # query weights are covered by the standalone attention check; through the
    # whole model their gradients sit near the finite-difference noise floor
    pick = ["encoder.conv_in.weight", "encoder.attn.wv", "decoder.up2.bias"]

    def fn(t):
        h = g.clone()
        for n, leaf in zip(pick, t[1:]):
            h.params[n] = leaf
        return F.mse(reconstruct(t[0], h), Tensor(x))

    return fn, [x * 0.9 + 0.05] + [g.params[n].data.copy() for n in pick]
