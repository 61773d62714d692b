"""Diagnostics: latent distances, difference ratios, Frechet latent distance, PSNR/SSIM, PCA."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)

ROLES = ("clean", "noisy", "protected", "protected_cat")
COLUMNS = ("d_a", "d_r", "d_a_cat", "s_c", "s_r", "s_a", "s_a_cat", "frechet", "psnr", "ssim")


class MetricError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def latent_mae(z, z_ref, reduction: str = "mean") -> float:
    """Mean (or summed) absolute difference between two latents."""
    z, z_ref = _pair(z, z_ref)
    diff = np.abs(z - z_ref)
    if reduction == "mean":
        return float(diff.mean())
    if reduction == "sum":
        return float(diff.sum())
    raise MetricError(f"unknown reduction {reduction!r}")


def per_image_mae(z: np.ndarray, z_ref: np.ndarray) -> np.ndarray:
    z, z_ref = _pair(z, z_ref)
    return np.abs(z - z_ref).reshape(len(z), -1).mean(axis=1)


def difference_ratio(z, z_tilde, z_c) -> float:
    """MAE(z, z_tilde) normalized by the value range of z_c."""
    z_b = float(np.max(z_c) - np.min(z_c))
    if z_b <= 0:
        raise MetricError("z_c is constant; the difference ratio is undefined")
    return latent_mae(z, z_tilde) / z_b


def sr_range(s_c: float, s_r: float, widen: float = 0.0) -> tuple[float, float]:
    """Interval centred on s_c with half-width |s_c - s_r|, optionally widened by a fraction."""
    half = abs(s_c - s_r) * (1.0 + widen)
    return (s_c - half, s_c + half)


def in_range(s: float, interval: tuple[float, float]) -> bool:
    return interval[0] <= s <= interval[1]


# ------------------------------------------------------------------ Frechet


def _moments(latents, shrinkage: float) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(latents, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 2:
        raise MetricError("need at least two latents to fit a covariance")
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    return mu, cov + shrinkage * np.eye(cov.shape[0])


def frechet_from_moments(mu1, s1, mu2, s2) -> float:
    diff = np.asarray(mu1) - np.asarray(mu2)
    covmean = _sqrtm_product(s1, s2)
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(covmean))
    return max(value, 0.0)


def _sqrtm_product(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    for jitter in (0.0, 1e-6, 1e-4):
        a = s1 + jitter * np.eye(len(s1))
        b = s2 + jitter * np.eye(len(s2))
        covmean = linalg.sqrtm(a @ b)
        if np.all(np.isfinite(covmean)):
            if jitter:
                log.warning("matrix square root needed jitter %g", jitter)
            return covmean.real
    raise MetricError("matrix square root failed after regularized retries")


def frechet_latent_distance(latents_a, latents_b, shrinkage: float = 1e-6) -> float:
    """Frechet distance between Gaussians fit to two latent sets (flattened per item)."""
    mu1, s1 = _moments(latents_a, shrinkage)
    mu2, s2 = _moments(latents_b, shrinkage)
    if mu1.shape != mu2.shape:
        raise MetricError(f"latent dims differ: {mu1.shape} vs {mu2.shape}")
    return frechet_from_moments(mu1, s1, mu2, s2)


# ------------------------------------------------------------------ pixel metrics


def psnr(x, y, peak: float = 1.0) -> float:
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return 99.0
    return min(99.0, 10.0 * np.log10(peak**2 / mse))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    d = np.arange(size) - size // 2
    g = np.exp(-(d**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the last two axes."""
    k = len(w)
    h = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1) @ w
    return np.lib.stride_tricks.sliding_window_view(h, k, axis=-2) @ w


def ssim(x, y, peak: float = 1.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over channels with a Gaussian window; inputs are (C, H, W) or (H, W).

    Images smaller than the window shrink it to the largest odd size that fits.
    """
    x, y = _pair(x, y)
    if x.ndim == 2:
        x, y = x[None], y[None]
    window = min(window, x.shape[-1] - (1 - x.shape[-1] % 2), x.shape[-2] - (1 - x.shape[-2] % 2))
    w = _gauss_window(window, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx**2
    syy = _filter_valid(y * y, w) - my**2
    sxy = _filter_valid(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx**2 + my**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def batch_psnr(xs, ys, peak: float = 1.0) -> float:
    return float(np.mean([psnr(a, b, peak) for a, b in zip(xs, ys)]))


def batch_ssim(xs, ys, peak: float = 1.0) -> float:
    return float(np.mean([ssim(a, b, peak) for a, b in zip(xs, ys)]))


# ------------------------------------------------------------------ PCA


@dataclass
class Projection:
    coords: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    explained: np.ndarray  # variance fraction per kept component

    def reconstruct(self) -> np.ndarray:
        return self.coords @ self.components + self.mean


def pca_project(latents, k: int = 2) -> Projection:
    """Project flattened latents onto their top-k principal directions."""
    x = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
    if k < 1 or k > min(x.shape):
        raise MetricError(f"k must lie in [1, {min(x.shape)}]")
    mean = x.mean(axis=0)
    u, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s**2
    total = var.sum()
    explained = var[:k] / total if total > 0 else np.zeros(k)
    # fix the sign of each direction so exports are reproducible
    signs = np.sign(vt[:k, np.argmax(np.abs(vt[:k]), axis=1)].diagonal())
    signs[signs == 0] = 1.0
    comps = vt[:k] * signs[:, None]
    return Projection((x - mean) @ comps.T, comps, mean, explained)


# ------------------------------------------------------------------ tables


@dataclass
class LatentRecord:
    image_id: str
    role: str
    latent: np.ndarray
    generator: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise MetricError(f"unknown role {self.role!r}")


@dataclass
class MetricTable:
    """Rows keyed by (attack, setting); every row carries its seed and corpus digest."""

    seed: int
    corpus_digest: str
    rows: list[dict] = field(default_factory=list)
    columns: tuple[str, ...] = COLUMNS

    def add(self, attack: str, setting: str, **values) -> dict:
        unknown = set(values) - set(self.columns) - {"method", "note"}
        if unknown:
            raise MetricError(f"unknown metric columns {sorted(unknown)}")
        row = {"attack": attack, "setting": setting, "seed": self.seed, "corpus_digest": self.corpus_digest}
        for k in self.columns:
            v = values.get(k)
            row[k] = float(v) if isinstance(v, (float, np.floating)) else (int(v) if isinstance(v, (int, np.integer)) and not isinstance(v, bool) else v)
        for k in ("method", "note"):
            if k in values:
                row[k] = values[k]
        self.rows.append(row)
        return row

    def get(self, attack: str, setting: str) -> dict:
        for r in self.rows:
            if r["attack"] == attack and r["setting"] == setting:
                return r
        raise KeyError((attack, setting))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "corpus_digest": self.corpus_digest, "columns": list(self.columns), "rows": self.rows}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricTable":
        return cls(d["seed"], d["corpus_digest"], [dict(r) for r in d["rows"]], tuple(d.get("columns", COLUMNS)))
