"""Labeled seed fan-out and content digests."""
from __future__ import annotations

import hashlib
import json

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit child seed for ``label`` under a run seed."""
    h = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))


def digest_arrays(arrays, extra: str = "") -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    h.update(extra.encode())
    return h.hexdigest()


def digest_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def digest_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
