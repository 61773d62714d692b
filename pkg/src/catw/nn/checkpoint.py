"""Checkpoint container.

Layout::

    b"CATW0001" | u64 LE header length | UTF-8 JSON header | pad | buffers

Each buffer starts on a 64-byte boundary measured from the start of the file
and is stored little-endian in header order.  Tensors carry a ``section`` of
``"base"`` or ``"adapter"``; an adapter-only file has no base section and can
be applied onto any base whose host shapes match.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from catw.nn.graph import Layer, LowRankAdapter, ModelGraph, Param, matrix_dims

MAGIC = b"CATW0001"
ALIGN = 64
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _tag(dtype) -> str:
    return {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}[np.dtype(dtype)]


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _write(path, header: dict, arrays: list[np.ndarray]) -> None:
    path = Path(path)
    offset = 0
    for entry, arr in zip(header["tensors"], arrays):
        entry["offset"] = offset
        entry["nbytes"] = arr.nbytes
        offset = _align(offset + arr.nbytes)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    data_start = _align(len(MAGIC) + 8 + len(blob))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(b"\0" * (data_start - fh.tell()))
        for entry, arr in zip(header["tensors"], arrays):
            fh.write(b"\0" * (data_start + entry["offset"] - fh.tell()))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[entry["dtype"]]).tobytes())
    os.replace(tmp, path)


def _read(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    data_start = _align(16 + hlen)
    arrays = {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        start = data_start + entry["offset"]
        arr = np.frombuffer(raw[start : start + entry["nbytes"]], dtype=dt).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="))
    return header, arrays


def _adapter_entries(graph: ModelGraph):
    entries, arrays = [], []
    for ad in graph.adapters.values():
        for p in ad.params():
            entries.append({"name": p.name, "shape": list(p.shape), "dtype": _tag(p.dtype), "section": "adapter", "host": ad.host})
            arrays.append(p.data)
    meta = [{"host": a.host, "rank": a.rank, "host_shape": list(graph.params[a.host].shape)} for a in graph.adapters.values()]
    return entries, arrays, meta


def save_checkpoint(graph: ModelGraph, path, adapters_only: bool = False) -> None:
    entries, arrays = [], []
    if not adapters_only:
        for name, p in graph.params.items():
            entries.append({"name": name, "shape": list(p.shape), "dtype": _tag(p.dtype), "section": "base", "trainable": p.trainable})
            arrays.append(p.data)
    a_entries, a_arrays, a_meta = _adapter_entries(graph)
    header = {
        "version": 1,
        "kind": graph.kind,
        "config": graph.config,
        "merged": graph.merged,
        "topology": [] if adapters_only else [{"name": l.name, "kind": l.kind, "params": l.params, "meta": l.meta} for l in graph.topology],
        "frozen_flags": graph._frozen_flags,
        "adapters": a_meta,
        "tensors": entries + a_entries,
    }
    _write(path, header, arrays + a_arrays)


def load_checkpoint(path) -> ModelGraph:
    header, arrays = _read(path)
    if not header["topology"]:
        raise CheckpointError(f"{path}: adapter-only checkpoint; use load_adapters onto a base graph")
    g = ModelGraph(header["kind"], header["config"])
    for entry in header["tensors"]:
        if entry["section"] == "base":
            g.params[entry["name"]] = Param(entry["name"], arrays[entry["name"]], entry.get("trainable", True))
    g.topology = [Layer(l["name"], l["kind"], list(l["params"]), l["meta"]) for l in header["topology"]]
    g.merged = header.get("merged", False)
    _attach_from(g, header, arrays, path)
    g._frozen_flags = header.get("frozen_flags")
    return g


def load_adapters(graph: ModelGraph, path) -> ModelGraph:
    """Attach the adapters stored in ``path`` onto a copy of ``graph``."""
    header, arrays = _read(path)
    g = graph.clone()
    if g.adapters:
        raise CheckpointError("base graph already carries adapters")
    g._frozen_flags = {n: p.trainable for n, p in g.params.items()}
    g.freeze()
    _attach_from(g, header, arrays, path)
    return g


def _attach_from(g: ModelGraph, header: dict, arrays: dict, path) -> None:
    for meta in header["adapters"]:
        host = meta["host"]
        if host not in g.params:
            raise CheckpointError(f"{path}: adapter host {host!r} not found in base graph")
        d, k = matrix_dims(g.params[host].shape)
        r = meta["rank"]
        down = arrays[host + ".lora_down"]
        up = arrays[host + ".lora_up"]
        if list(g.params[host].shape) != list(meta["host_shape"]) or down.shape != (r, k) or up.shape != (d, r):
            raise CheckpointError(
                f"{path}: adapter host {host!r} shape mismatch: base {tuple(g.params[host].shape)}, "
                f"adapter expects {tuple(meta['host_shape'])}"
            )
        g.adapters[host] = LowRankAdapter(host, r, Param(host + ".lora_down", down), Param(host + ".lora_up", up))
