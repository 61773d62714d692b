"""Protective perturbations: an L-infinity PGD engine and its objective catalogue.

Objectives stand in for published protection methods (see ``NAMED_METHODS``).
Every loss is mean-reduced over elements, so one step size works at any
resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from catw.autoencoder import decode, encode
from catw.diffusion import NoiseSchedule, _predict, denoise_loss, draw_noise, q_sample
from catw.nn.graph import ModelGraph
from catw.nn.gradcheck import register
from catw.nn.tensor import Tensor, as_tensor, square

OBJECTIVES = (
    "encoder_away",
    "encoder_target",
    "recon",
    "denoise_ascent",
    "denoise_descent",
    "joint",
    "sds_ascent",
    "sds_descent",
)

# published method -> stand-in objective; None marks methods not replicated
NAMED_METHODS = {
    "AdvDM(+)": "denoise_ascent",
    "AdvDM(-)": "denoise_descent",
    "Mist": "joint",
    "SDS(+)": "sds_ascent",
    "SDS(-)": "sds_descent",
    "SDST": "sds_descent",
    "Glaze": "encoder_target",
    "Photoguard": "recon",
    "Anti-DreamBooth": None,
    "MetaCloak": None,
}

ASCENT = {"encoder_away": 1, "encoder_target": -1, "recon": 1, "denoise_ascent": 1, "denoise_descent": -1, "joint": 1, "sds_ascent": 1, "sds_descent": -1}

NEEDS_AE = set(OBJECTIVES)
NEEDS_DIFFUSION = {"denoise_ascent", "denoise_descent", "joint", "sds_ascent", "sds_descent"}


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    objective: str = "encoder_away"
    budget: float = 16 / 255
    steps: int = 40
    step_size: float | None = None  # defaults to budget / 8
    random_start: bool | None = None  # None -> objective default
    weights: tuple[float, float] = (1.0, 1.0)
    target_latent: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise AttackConfigError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")
        if not 0.0 <= self.budget <= 1.0:
            raise AttackConfigError(f"budget must lie in [0, 1], got {self.budget}")
        if self.steps < 0:
            raise AttackConfigError("steps must be >= 0")
        if self.steps > 0 and self.alpha <= 0 and self.budget > 0:
            raise AttackConfigError("step size must be > 0")
        if self.objective == "encoder_target" and self.target_latent is None:
            raise AttackConfigError("encoder_target requires target_latent")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.budget / 8

    @property
    def use_random_start(self) -> bool:
        if self.random_start is not None:
            return self.random_start
        # E(x) - E(x_c) has an exactly zero gradient at x = x_c
        return self.objective == "encoder_away"


@dataclass
class AttackModels:
    ae: object | None = None  # ModelGraph, or a stub with encode/decode callables
    diffusion: object | None = None  # ModelGraph or an eps-predicting callable
    schedule: NoiseSchedule | None = None
    token: int = 0
    latent_scale: float | None = None

    @property
    def scale(self) -> float:
        if self.latent_scale is not None:
            return self.latent_scale
        if isinstance(self.ae, ModelGraph):
            return float(self.ae.config.get("latent_scale", 1.0))
        return 1.0


@dataclass
class ProtectedSample:
    clean: np.ndarray
    protected: np.ndarray
    objective: str
    achieved_budget: float
    trajectory: list[float] = field(default_factory=list)


# ------------------------------------------------------------------ model adapters


def _encoder(ae) -> Callable[[Tensor], Tensor]:
    if isinstance(ae, ModelGraph):
        return lambda x: encode(x, ae)
    if hasattr(ae, "encode"):
        return lambda x: as_tensor(ae.encode(x))
    return lambda x: as_tensor(ae(x))


def _reconstructor(ae) -> Callable[[Tensor], Tensor]:
    if isinstance(ae, ModelGraph):
        return lambda x: decode(encode(x, ae), ae)
    if hasattr(ae, "decode"):
        return lambda x: as_tensor(ae.decode(_encoder(ae)(x)))
    return lambda x: as_tensor(ae(x))


# ------------------------------------------------------------------ objectives


def objective_encoder_away(x, x_c, ae) -> Tensor:
    """mean (E(x) - E(x_c))^2, to be maximized."""
    enc = _encoder(ae)
    z_c = enc(as_tensor(x_c)).data
    return square(enc(as_tensor(x)) - Tensor(z_c)).mean()


def objective_encoder_target(x, z_tgt, ae) -> Tensor:
    """mean (E(x) - z_tgt)^2, to be minimized."""
    return square(_encoder(ae)(as_tensor(x)) - Tensor(np.asarray(z_tgt))).mean()


def objective_recon(x, x_c, ae) -> Tensor:
    """mean (D(E(x)) - x_c)^2, to be maximized."""
    return square(_reconstructor(ae)(as_tensor(x)) - Tensor(np.asarray(x_c))).mean()


def objective_denoise(x, ae, diffusion, rng: np.random.Generator, schedule: NoiseSchedule, token: int = 0, latent_scale: float = 1.0) -> Tensor:
    """The denoising loss evaluated at the (scaled) latent E(x)."""
    z = _encoder(ae)(as_tensor(x)) * latent_scale
    return denoise_loss(diffusion, z, token, schedule, rng)


def objective_joint(x, x_c, weights, ae, diffusion, rng, schedule: NoiseSchedule, token: int = 0, latent_scale: float = 1.0) -> Tensor:
    """weights[0] * encoder_away + weights[1] * denoise (both maximized)."""
    w_enc, w_den = weights
    out = None
    if w_enc:
        out = objective_encoder_away(x, x_c, ae) * float(w_enc)
    if w_den:
        term = objective_denoise(x, ae, diffusion, rng, schedule, token, latent_scale) * float(w_den)
        out = term if out is None else out + term
    if out is None:
        return Tensor(np.zeros((), dtype=np.asarray(x).dtype if not isinstance(x, Tensor) else x.dtype))
    return out


def sds_gradient(x, ae, diffusion, rng: np.random.Generator, schedule: NoiseSchedule, token: int = 0, latent_scale: float = 1.0, return_latent_grad: bool = False):
    """Score-distillation gradient d/dx: (eps_hat(z_t, t) - eps) pulled back through E only.

    The denoiser is evaluated without building a graph, so no gradient
    flows through its parameters or its input.
    """
    x = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x), requires_grad=True)
    z = _encoder(ae)(x)
    zs = z.data * latent_scale
    t, eps = draw_noise(rng, zs.shape, schedule, zs.dtype)
    z_t = q_sample(Tensor(zs), t, eps, schedule)
    eps_hat = _predict(diffusion, Tensor(z_t.data), t, token).data
    grad_z = (eps_hat - eps).astype(z.dtype)
    z.backward(grad_z)
    if return_latent_grad:
        return x.grad, grad_z
    return x.grad


# ------------------------------------------------------------------ engine


def _require(cfg: AttackConfig, models: AttackModels) -> None:
    if cfg.objective in NEEDS_AE and models.ae is None:
        raise AttackConfigError(f"objective {cfg.objective!r} needs an autoencoder")
    if cfg.objective in NEEDS_DIFFUSION and (models.diffusion is None or models.schedule is None):
        raise AttackConfigError(f"objective {cfg.objective!r} needs a diffusion model and schedule")


def evaluate_objective(x: np.ndarray, x_c: np.ndarray, cfg: AttackConfig, models: AttackModels, rng: np.random.Generator):
    """(value, d value / d x) of the configured objective at ``x``."""
    obj = cfg.objective
    if obj.startswith("sds"):
        g = sds_gradient(x, models.ae, models.diffusion, rng, models.schedule, models.token, models.scale)
        return float("nan"), g
    xt = Tensor(np.array(x), requires_grad=True)
    if obj == "encoder_away":
        v = objective_encoder_away(xt, x_c, models.ae)
    elif obj == "encoder_target":
        v = objective_encoder_target(xt, cfg.target_latent, models.ae)
    elif obj == "recon":
        v = objective_recon(xt, x_c, models.ae)
    elif obj == "joint":
        v = objective_joint(xt, x_c, cfg.weights, models.ae, models.diffusion, rng, models.schedule, models.token, models.scale)
    else:
        v = objective_denoise(xt, models.ae, models.diffusion, rng, models.schedule, models.token, models.scale)
    if v._backward is not None:
        v.backward()
    g = xt.grad if xt.grad is not None else np.zeros_like(x)
    return v.item(), g


def pgd_attack(
    x_c: np.ndarray,
    models: AttackModels,
    cfg: AttackConfig,
    rng: np.random.Generator,
    gradient_fn: Callable | None = None,
) -> ProtectedSample:
    """Sign-gradient PGD inside the L-infinity ball of radius ``cfg.budget`` around ``x_c``.

    ``gradient_fn(x, rng) -> (value, grad)`` overrides the configured
    objective (used by tests with hand-made gradients).
    """
    if gradient_fn is None:
        _require(cfg, models)
    x_c = np.asarray(x_c)
    dtype = x_c.dtype
    delta = dtype.type(cfg.budget)
    lo = np.clip(x_c - delta, 0.0, 1.0).astype(dtype)
    hi = np.clip(x_c + delta, 0.0, 1.0).astype(dtype)
    x = x_c.copy()
    if cfg.use_random_start and cfg.budget > 0:
        x = np.clip(x + rng.uniform(-cfg.budget, cfg.budget, size=x.shape).astype(dtype), lo, hi)
    direction = ASCENT[cfg.objective]
    alpha = dtype.type(cfg.alpha)
    trajectory = []
    for _ in range(cfg.steps):
        if cfg.budget == 0:
            break
        if gradient_fn is not None:
            value, g = gradient_fn(x, rng)
        else:
            value, g = evaluate_objective(x, x_c, cfg, models, rng)
        trajectory.append(value)
        x = np.clip(x + direction * alpha * np.sign(g).astype(dtype), lo, hi)
    return ProtectedSample(x_c, x, cfg.objective, float(np.max(np.abs(x - x_c))) if x.size else 0.0, trajectory)


def make_noisy_baseline(x_c: np.ndarray, delta: float, rng: np.random.Generator) -> np.ndarray:
    """x_r = clamp(x_c + clip(r, -delta, delta), 0, 1) with r ~ N(0, delta^2)."""
    if delta < 0:
        raise AttackConfigError("delta must be >= 0")
    x_c = np.asarray(x_c)
    if delta == 0:
        return x_c.copy()
    r = np.clip(rng.normal(0.0, delta, size=x_c.shape), -delta, delta)
    return np.clip(x_c + r.astype(x_c.dtype), 0.0, 1.0).astype(x_c.dtype)


@register("objective_recon")
def _check_recon(rng):
    from catw.autoencoder import AutoencoderConfig, build_autoencoder

    g = build_autoencoder(AutoencoderConfig(image_size=8, base_channels=2, latent_channels=2), seed=3).astype(np.float64)
    x_c = rng.uniform(0.2, 0.8, size=(1, 3, 8, 8))
    return (lambda t: objective_recon(t[0], x_c, g)), [x_c + rng.uniform(-0.05, 0.05, size=x_c.shape)]


@register("objective_encoder_away")
def _check_away(rng):
    from catw.autoencoder import AutoencoderConfig, build_autoencoder

    g = build_autoencoder(AutoencoderConfig(image_size=8, base_channels=2, latent_channels=2), seed=4).astype(np.float64)
    x_c = rng.uniform(0.2, 0.8, size=(1, 3, 8, 8))
    return (lambda t: objective_encoder_away(t[0], x_c, g)), [x_c + rng.uniform(-0.05, 0.05, size=x_c.shape)]
