"""Image corpora: procedural synthetic identities, folder ingestion, PNG persistence."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from catw.seeding import derive_seed, digest_arrays

log = logging.getLogger(__name__)

SPLITS = ("reference", "protect_target", "extra_reference")

# well-separated RGB triples; identities draw foreground/background pairs from here
PALETTE = np.array(
    [
        [0.90, 0.20, 0.15],
        [0.15, 0.55, 0.90],
        [0.95, 0.80, 0.15],
        [0.20, 0.75, 0.30],
        [0.60, 0.25, 0.75],
        [0.95, 0.55, 0.10],
        [0.10, 0.75, 0.75],
        [0.85, 0.35, 0.65],
        [0.45, 0.30, 0.15],
        [0.85, 0.85, 0.85],
        [0.15, 0.15, 0.25],
        [0.55, 0.80, 0.20],
    ]
)
SHAPES = ("disc", "square", "triangle", "diamond", "ring", "cross")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    kind: str = "synthetic"
    identities: int = 5
    images_per_identity: int = 12
    size: int = 32
    path: str | None = None
    split: tuple[int, int, int] = (4, 4, 4)

    def __post_init__(self):
        if self.kind not in ("synthetic", "folder"):
            raise CorpusError(f"unknown corpus kind {self.kind!r}")
        if self.kind == "folder" and not self.path:
            raise CorpusError("folder corpus needs a path")
        if self.identities < 1 or self.images_per_identity < 1 or self.size < 4:
            raise CorpusError("identities, images_per_identity must be >= 1 and size >= 4")
        if sum(self.split) != self.images_per_identity:
            raise CorpusError(f"split sizes {self.split} must sum to images_per_identity={self.images_per_identity}")


@dataclass
class Corpus:
    images: np.ndarray  # (N, 3, S, S) float32 in [0, 1]
    ids: list[str]
    identity: np.ndarray  # (N,) int
    split: list[str]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def select(self, split: str | None = None, identity: int | None = None) -> "Corpus":
        keep = [
            i
            for i in range(len(self))
            if (split is None or self.split[i] == split) and (identity is None or self.identity[i] == identity)
        ]
        return Corpus(
            self.images[keep],
            [self.ids[i] for i in keep],
            self.identity[keep],
            [self.split[i] for i in keep],
            dict(self.meta),
        )

    def digest(self) -> str:
        return digest_arrays([self.images], extra=json.dumps([self.ids, self.split]))

    def index(self) -> list[dict]:
        return [
            {"id": i, "identity": int(k), "split": s, "file": f"{i}.png"}
            for i, k, s in zip(self.ids, self.identity, self.split)
        ]


# ------------------------------------------------------------------ synthesis


def _identity_params(rng: np.random.Generator, idx: int) -> dict:
    fg, bg, bg2 = rng.choice(len(PALETTE), size=3, replace=False)
    return {
        "shape": SHAPES[(idx + int(rng.integers(len(SHAPES)))) % len(SHAPES)],
        "fg": PALETTE[fg],
        "bg": PALETTE[bg],
        "bg2": PALETTE[bg2],
        "texture": ("hstripes", "vstripes", "gradient", "checker")[int(rng.integers(4))],
        "period": float(rng.uniform(10.0, 16.0)),
        "base_scale": float(rng.uniform(0.22, 0.32)),
    }


def _soft(d: np.ndarray, px: float) -> np.ndarray:
    """Anti-aliased inside mask from a signed distance (negative inside)."""
    return np.clip(0.5 - d / px, 0.0, 1.0)


def _render(p: dict, s: int, dx: float, dy: float, scale: float) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    u = (xx + 0.5) / s - 0.5 - dx
    v = (yy + 0.5) / s - 0.5 - dy
    px = 1.0 / s
    t = p["texture"]
    if t == "hstripes":
        w = 0.5 + 0.5 * np.sin(2 * np.pi * yy / p["period"])
    elif t == "vstripes":
        w = 0.5 + 0.5 * np.sin(2 * np.pi * xx / p["period"])
    elif t == "gradient":
        w = (xx + yy) / (2 * s - 2)
    else:
        w = ((np.floor(xx / p["period"]) + np.floor(yy / p["period"])) % 2) * 0.8 + 0.1
    bg = p["bg"][:, None, None] * (1 - w) + p["bg2"][:, None, None] * w
    r = scale
    shape = p["shape"]
    if shape == "disc":
        d = np.hypot(u, v) - r
    elif shape == "square":
        d = np.maximum(np.abs(u), np.abs(v)) - r * 0.85
    elif shape == "diamond":
        d = (np.abs(u) + np.abs(v)) / np.sqrt(2) - r * 0.8
    elif shape == "ring":
        d = np.abs(np.hypot(u, v) - r * 0.8) - r * 0.3
    elif shape == "cross":
        d = np.minimum(
            np.maximum(np.abs(u) - r, np.abs(v) - r * 0.35),
            np.maximum(np.abs(u) - r * 0.35, np.abs(v) - r),
        )
    else:  # triangle, apex up
        k = np.sqrt(3.0)
        q_u, q_v = np.abs(u) / r, -v / r
        d = np.maximum(k * q_u * 0.5 + q_v * 0.5, -q_v) * r - r * 0.5
    m = _soft(d, px)
    img = bg * (1 - m) + p["fg"][:, None, None] * m
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_corpus(spec: CorpusSpec = CorpusSpec(), seed: int = 0) -> Corpus:
    """Procedural identities; every identity is one (shape, palette, texture) tuple."""
    if spec.kind != "synthetic":
        raise CorpusError("synth_corpus needs a synthetic CorpusSpec")
    id_rng = np.random.default_rng(derive_seed(seed, "identities"))
    params = [_identity_params(id_rng, i) for i in range(spec.identities)]
    images, ids, ident, split = [], [], [], []
    labels = [name for name, n in zip(SPLITS, spec.split) for _ in range(n)]
    for k, p in enumerate(params):
        rng = np.random.default_rng(derive_seed(seed, f"identity/{k}"))
        for j in range(spec.images_per_identity):
            dx, dy = rng.uniform(-0.12, 0.12, size=2)
            scale = p["base_scale"] * rng.uniform(0.85, 1.15)
            images.append(_render(p, spec.size, dx, dy, scale))
            ids.append(f"id{k:02d}_{j:02d}")
            ident.append(k)
            split.append(labels[j])
    return Corpus(np.stack(images), ids, np.array(ident, dtype=np.int64), split, {"spec": asdict(spec), "seed": seed})


# ------------------------------------------------------------------ IO


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, S, S) float in [0, 1] -> (S, S, 3) uint8."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (np.asarray(arr, dtype=np.float32) / 255.0).transpose(2, 0, 1)


def save_corpus(corpus: Corpus, directory, sidecar: dict | None = None) -> Path:
    """Write one PNG per image plus ``index.json``; pixels are quantized to 8 bits.

    A raw float copy (``pixels.npy``) is written too so downstream stages see
    exactly the values the producing stage computed.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for img, name in zip(corpus.images, corpus.ids):
        Image.fromarray(to_uint8(img)).save(directory / f"{name}.png", optimize=False)
    _atomic_npy(directory / "pixels.npy", corpus.images)
    doc = {"images": corpus.index(), "meta": corpus.meta}
    if sidecar is not None:
        doc["sidecar"] = sidecar
    _atomic_text(directory / "index.json", json.dumps(doc, indent=1, sort_keys=True, default=_jsonable))
    return directory


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    doc = json.loads((directory / "index.json").read_text())
    entries = doc["images"]
    raw = directory / "pixels.npy"
    if raw.exists():
        images = np.load(raw)
    else:
        images = np.stack([from_uint8(np.array(Image.open(directory / e["file"]).convert("RGB"))) for e in entries])
    meta = dict(doc.get("meta", {}))
    if "sidecar" in doc:
        meta["sidecar"] = doc["sidecar"]
    return Corpus(
        images.astype(np.float32),
        [e["id"] for e in entries],
        np.array([e["identity"] for e in entries], dtype=np.int64),
        [e["split"] for e in entries],
        meta,
    )


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_npy(path: Path, arr: np.ndarray) -> None:
    tmp = path.with_name(path.name + ".tmp.npy")
    np.save(tmp, arr)
    os.replace(tmp, path)


# ------------------------------------------------------------------ ingestion


def center_crop_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Center-crop an (H, W, C) float image to a square, then bilinear-resize to size x size.

    Bilinear sampling uses half-pixel centers; when the crop is already
    ``size`` pixels wide the image is returned unchanged.
    """
    h, w = img.shape[:2]
    m = min(h, w)
    top, left = (h - m) // 2, (w - m) // 2
    crop = img[top : top + m, left : left + m]
    if m == size:
        return crop.copy()
    scale = m / size
    src = (np.arange(size) + 0.5) * scale - 0.5
    src = np.clip(src, 0, m - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, m - 1)
    f = (src - i0)[:, None]
    rows = crop[i0] * (1 - f)[..., None] + crop[i1] * f[..., None]
    g = (src - i0)[None, :, None]
    return rows[:, i0] * (1 - g) + rows[:, i1] * g


def ingest_folder(path, size: int = 32, split: tuple[int, int, int] | None = None) -> tuple[Corpus, list[str]]:
    """Load every decodable PNG/PPM/JPEG under ``path`` (one subfolder per identity).

    Images directly under ``path`` count as a single identity.  Returns the
    corpus and the list of files that could not be decoded.
    """
    root = Path(path)
    if not root.is_dir():
        raise CorpusError(f"{root} is not a directory")
    groups = sorted(p for p in root.iterdir() if p.is_dir())
    if not groups:
        groups = [root]
    exts = {".png", ".ppm", ".jpg", ".jpeg", ".bmp"}
    images, ids, ident, splits, skipped = [], [], [], [], []
    for k, folder in enumerate(groups):
        files = sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in exts)
        kept = 0
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            except Exception:  # undecodable inputs are reported, not fatal
                skipped.append(str(f))
                continue
            images.append(center_crop_resize(arr, size).transpose(2, 0, 1).astype(np.float32))
            ids.append(f"id{k:02d}_{kept:02d}")
            ident.append(k)
            kept += 1
        n = kept
        sizes = split if split is not None else (n - 2 * (n // 3), n // 3, n // 3)
        labels = [name for name, c in zip(SPLITS, sizes) for _ in range(c)]
        labels += ["reference"] * (n - len(labels))
        splits.extend(labels[:n])
    if skipped:
        log.warning("skipped %d undecodable files", len(skipped))
    if not images:
        raise CorpusError(f"no decodable images under {root}")
    corpus = Corpus(np.stack(images), ids, np.array(ident, dtype=np.int64), splits, {"source": str(root), "size": size})
    return corpus, skipped
