"""Toy epsilon-prediction DDPM over autoencoder latents, conditioned on a concept token."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Union

import numpy as np

from catw.autoencoder import TrainingDiverged
from catw.nn import functional as F
from catw.nn.graph import Adam, ModelGraph, backward
from catw.nn.gradcheck import register
from catw.nn.tensor import Tensor, as_tensor, index_rows, reshape, silu, square

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # index t-1 holds beta_t
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[np.asarray(t) - 1]

    def posterior_variance(self, t: int) -> float:
        if t == 1:
            return 0.0
        ab, ab_prev = self.alpha_bars[t - 1], self.alpha_bars[t - 2]
        return float(self.betas[t - 1] * (1.0 - ab_prev) / (1.0 - ab))


def make_linear_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) < 1 or np.any(betas <= 0) or np.any(betas >= 1):
        raise ScheduleError("betas must be a non-empty vector in (0, 1)")
    return NoiseSchedule(betas, 1.0 - betas, np.cumprod(1.0 - betas))


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ScheduleError(f"timestep out of range [1, {schedule.T}]: {t}")
    return t


def _bcast(v: np.ndarray, ndim: int, dtype) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).astype(dtype)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def q_sample(z0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` scalar or one per sample."""
    t = _check_t(t, schedule)
    z0 = as_tensor(z0)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps)
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    ab = schedule.alpha_bar(t)
    a = _bcast(np.sqrt(ab), z0.ndim, z0.dtype)
    b = _bcast(np.sqrt(1.0 - ab), z0.ndim, z0.dtype)
    return z0 * Tensor(a) + Tensor(b * eps.astype(z0.dtype))


# ------------------------------------------------------------------ denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    channels: int = 32
    concept_vocab: int = 8
    temb_dim: int = 32
    attention: bool = True

    def __post_init__(self):
        if self.concept_vocab < 1:
            raise ValueError("concept_vocab must be >= 1")


def _lin(rng, fin, fout, gain=1.0):
    return {
        "weight": rng.normal(0.0, gain / np.sqrt(fin), size=(fout, fin)).astype(np.float32),
        "bias": np.zeros(fout, dtype=np.float32),
    }


def _cv(rng, cin, cout, gain=1.0):
    return {
        "weight": rng.normal(0.0, gain / np.sqrt(cin * 9), size=(cout, cin, 3, 3)).astype(np.float32),
        "bias": np.zeros(cout, dtype=np.float32),
    }


def build_denoiser(cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0) -> ModelGraph:
    rng = np.random.default_rng(seed)
    zc, h, w = cfg.latent_shape
    c, e = cfg.channels, 2 * cfg.channels
    d = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
    g = ModelGraph("denoiser", {"denoiser": d})
    g.add_layer("denoiser.temb1", "linear", _lin(rng, cfg.temb_dim, e))
    g.add_layer("denoiser.temb2", "linear", _lin(rng, e, e))
    g.add_layer("denoiser.token", "embedding", {"table": rng.normal(0.0, 1.0, size=(cfg.concept_vocab, e)).astype(np.float32)})
    g.add_layer("denoiser.pos", "map", {"map": rng.normal(0.0, 0.1, size=(c, h, w)).astype(np.float32)})
    g.add_layer("denoiser.conv_in", "conv", _cv(rng, zc, c))
    for blk in ("res1", "res2"):
        g.add_layer(f"denoiser.{blk}.conv1", "conv", _cv(rng, c, c))
        g.add_layer(f"denoiser.{blk}.emb", "linear", _lin(rng, e, c))
        g.add_layer(f"denoiser.{blk}.conv2", "conv", _cv(rng, c, c, gain=0.5))
    if cfg.attention:
        s = 1.0 / np.sqrt(c)
        g.add_layer(
            "denoiser.attn",
            "attention",
            {n: rng.normal(0.0, s * gn, size=(c, c)).astype(np.float32) for n, gn in (("wq", 1.0), ("wk", 1.0), ("wv", 1.0), ("wo", 0.5))},
        )
    g.add_layer("denoiser.conv_out", "conv", _cv(rng, c, zc, gain=0.1))
    return g


def denoiser_config(graph: ModelGraph) -> DenoiserConfig:
    d = dict(graph.config["denoiser"])
    d["latent_shape"] = tuple(d["latent_shape"])
    return DenoiserConfig(**d)


def _linear(g: ModelGraph, name: str, x: Tensor) -> Tensor:
    return F.linear(x, g.weight(name + ".weight"), g[name + ".bias"])


def _conv(g: ModelGraph, name: str, x: Tensor) -> Tensor:
    return F.conv2d(x, g.weight(name + ".weight"), g[name + ".bias"], padding=1)


def predict_eps(graph: ModelGraph, z_t, t, token) -> Tensor:
    """Denoiser forward: epsilon prediction for a batch at timesteps ``t``."""
    cfg = denoiser_config(graph)
    z_t = as_tensor(z_t)
    n = z_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    token = np.broadcast_to(np.asarray(token, dtype=np.int64), (n,))
    if np.any(token < 0) or np.any(token >= cfg.concept_vocab):
        raise ValueError(f"token out of range [0, {cfg.concept_vocab})")
    temb = Tensor(F.timestep_embedding(t, cfg.temb_dim, dtype=z_t.dtype))
    emb = _linear(graph, "denoiser.temb2", silu(_linear(graph, "denoiser.temb1", temb)))
    emb = silu(emb + index_rows(graph["denoiser.token.table"], token))
    h = _conv(graph, "denoiser.conv_in", z_t) + graph["denoiser.pos.map"]
    for blk in ("res1", "res2"):
        r = _conv(graph, f"denoiser.{blk}.conv1", silu(h))
        r = r + reshape(_linear(graph, f"denoiser.{blk}.emb", emb), (n, cfg.channels, 1, 1))
        h = h + _conv(graph, f"denoiser.{blk}.conv2", silu(r))
        if blk == "res1" and cfg.attention:
            h = F.attention(h, *(graph.weight(f"denoiser.attn.{p}") for p in ("wq", "wk", "wv", "wo")))
    return _conv(graph, "denoiser.conv_out", silu(h))


Denoiser = Union[ModelGraph, Callable[[Tensor, np.ndarray, np.ndarray], Tensor]]


def _predict(model: Denoiser, z_t, t, token) -> Tensor:
    if isinstance(model, ModelGraph):
        return predict_eps(model, z_t, t, token)
    return as_tensor(model(z_t, t, token))


def draw_noise(rng: np.random.Generator, shape: tuple, schedule: NoiseSchedule, dtype=np.float32):
    """One (t, eps) Monte-Carlo draw per sample: t uniform in [1, T], eps ~ N(0, I)."""
    t = rng.integers(1, schedule.T + 1, size=shape[0])
    eps = rng.standard_normal(shape).astype(dtype)
    return t, eps


def denoise_loss(model: Denoiser, z0, token, schedule: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """Mean squared error between injected noise and the model's prediction."""
    z0 = as_tensor(z0)
    t, eps = draw_noise(rng, z0.shape, schedule, z0.dtype)
    z_t = q_sample(z0, t, eps, schedule)
    return square(_predict(model, z_t, t, token) - Tensor(eps)).mean()


@dataclass(frozen=True)
class FinetuneHParams:
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 8
    mode: str = "full"  # full | adapter
    rank: int = 8

    def __post_init__(self):
        if self.mode not in ("full", "adapter"):
            raise ValueError(f"unknown fine-tune mode {self.mode!r}")


def finetune(
    graph: ModelGraph,
    latents: np.ndarray,
    token,
    schedule: NoiseSchedule,
    hparams: FinetuneHParams = FinetuneHParams(),
    seed: int = 0,
) -> tuple[ModelGraph, list[float]]:
    """Train a copy of ``graph`` on ``latents``; ``token`` is one id or one per latent.

    ``mode="adapter"`` freezes the base and trains low-rank adapters on every
    conv, attention and linear layer instead.
    """
    latents = np.asarray(latents, dtype=graph.dtype)
    if len(latents) == 0:
        raise ValueError("no latents to fine-tune on")
    tokens = np.broadcast_to(np.asarray(token, dtype=np.int64), (len(latents),))
    g = graph.clone()
    if hparams.mode == "adapter" and hparams.steps:
        arng = np.random.default_rng([seed, 7])
        for layer in g.topology:
            for host in _denoiser_hosts(layer):
                d, k = g[host].shape[0], int(np.prod(g[host].shape[1:]))
                g.attach_adapter(host, min(hparams.rank, d, k), arng)
    rng = np.random.default_rng([seed, 3])
    opt = Adam(g.trainable_params(), lr=hparams.lr)
    curve: list[float] = []
    for step in range(hparams.steps):
        idx = rng.integers(0, len(latents), size=hparams.batch)
        loss = denoise_loss(g, latents[idx], tokens[idx], schedule, rng)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        backward(loss, g)
        opt.step()
        curve.append(value)
    return g, curve


def _denoiser_hosts(layer) -> list[str]:
    if layer.kind == "linear":
        return [p for p in layer.params if p.endswith(".weight")]
    return layer.adaptable


def mean_denoise_loss(model: Denoiser, z0: np.ndarray, token, schedule: NoiseSchedule, draws: int = 64, seed: int = 0) -> float:
    """Monte-Carlo estimate of the denoising loss with a fixed evaluation stream."""
    rng = np.random.default_rng([seed, 11])
    z0 = np.asarray(z0)
    reps = np.repeat(z0, int(np.ceil(draws / len(z0))), axis=0)[:draws]
    return denoise_loss(model, reps, token, schedule, rng).item()


def sample(model: Denoiser, token, schedule: NoiseSchedule, rng: np.random.Generator, n: int = 1, shape=None) -> np.ndarray:
    """Ancestral DDPM sampling from z_T ~ N(0, I) down to z_0 (posterior variance)."""
    if shape is None:
        shape = denoiser_config(model).latent_shape
    dtype = model.dtype if isinstance(model, ModelGraph) else np.float32
    z = rng.standard_normal((n,) + tuple(shape)).astype(dtype)
    for t in range(schedule.T, 0, -1):
        eps_hat = _predict(model, Tensor(z), np.full(n, t), token).data
        beta, ab = schedule.betas[t - 1], schedule.alpha_bars[t - 1]
        mean = (z - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(schedule.alphas[t - 1])
        if t > 1:
            mean = mean + np.sqrt(schedule.posterior_variance(t)) * rng.standard_normal(z.shape)
        z = mean.astype(dtype)
    return z


@register("denoise_loss")
def _check_denoise(rng):
    cfg = DenoiserConfig(latent_shape=(2, 2, 2), channels=2, concept_vocab=2, temb_dim=4)
    g = build_denoiser(cfg, seed=int(rng.integers(1 << 31))).astype(np.float64)
    sched = make_linear_schedule(10)
    seed = int(rng.integers(1 << 31))
    pick = ["denoiser.conv_in.weight", "denoiser.attn.wk", "denoiser.token.table", "denoiser.res1.emb.weight"]

    def fn(t):
        h = g.clone()
        for n, leaf in zip(pick, t[1:]):
            h.params[n] = leaf
        return denoise_loss(h, t[0], 1, sched, np.random.default_rng(seed))

    return fn, [rng.normal(size=(2, 2, 2, 2))] + [g[n].data.copy() for n in pick]
