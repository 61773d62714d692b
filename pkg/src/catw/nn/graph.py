"""Named parameter containers, low-rank adapters and the Adam optimizer."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from catw.nn.tensor import Tensor, add, matmul, reshape


class AdapterError(ValueError):
    """Adapter configuration or attachment is invalid."""


class Param(Tensor):
    """A named leaf tensor; ``trainable`` doubles as ``requires_grad``."""

    __slots__ = ("name",)

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(np.array(value, copy=True), requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def matrix_dims(shape: tuple) -> tuple[int, int]:
    """(d, k) of a weight viewed as a matrix: d = out features, k = the rest."""
    return int(shape[0]), int(np.prod(shape[1:]))


@dataclass
class LowRankAdapter:
    host: str
    rank: int
    down: Param  # A, r x k
    up: Param  # B, d x r

    @classmethod
    def create(cls, host: Param, rank: int, rng: np.random.Generator, init_std: float = 0.01):
        d, k = matrix_dims(host.shape)
        if rank < 1 or rank > min(d, k):
            raise AdapterError(f"rank {rank} for {host.name!r} must lie in [1, min(d, k) = {min(d, k)}]")
        down = rng.normal(0.0, init_std, size=(rank, k)).astype(host.dtype)
        up = np.zeros((d, rank), dtype=host.dtype)
        return cls(host.name, rank, Param(host.name + ".lora_down", down), Param(host.name + ".lora_up", up))

    def delta(self) -> Tensor:
        return matmul(self.up, self.down)

    def params(self) -> list[Param]:
        return [self.down, self.up]

    @property
    def num_params(self) -> int:
        return self.down.data.size + self.up.data.size


@dataclass
class Layer:
    """One entry of a graph's declarative topology."""

    name: str
    kind: str  # conv | attention | linear | embedding | map
    params: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def adaptable(self) -> list[str]:
        """Host parameter names eligible for adapters (weights, not biases)."""
        if self.kind == "conv":
            return [p for p in self.params if p.endswith(".weight")]
        if self.kind == "attention":
            return [p for p in self.params if p.rsplit(".", 1)[-1] in ("wq", "wk", "wv", "wo")]
        return []


class ModelGraph:
    """Ordered named params, adapters keyed by host name, and a layer list."""

    def __init__(self, kind: str = "graph", config: dict | None = None):
        self.kind = kind
        self.config = dict(config or {})
        self.params: dict[str, Param] = {}
        self.adapters: dict[str, LowRankAdapter] = {}
        self.topology: list[Layer] = []
        self.merged = False
        self._frozen_flags: dict[str, bool] | None = None

    # ------------------------------------------------------------ building
    def add_param(self, name: str, value, trainable: bool = True) -> Param:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, value, trainable)
        self.params[name] = p
        return p

    def add_layer(self, name: str, kind: str, params: dict[str, np.ndarray], **meta) -> Layer:
        names = []
        for suffix, value in params.items():
            self.add_param(f"{name}.{suffix}", value)
            names.append(f"{name}.{suffix}")
        layer = Layer(name, kind, names, meta)
        self.topology.append(layer)
        return layer

    def layer(self, name: str) -> Layer:
        for layer in self.topology:
            if layer.name == name:
                return layer
        raise KeyError(name)

    # ------------------------------------------------------------ access
    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def weight(self, name: str) -> Tensor:
        """Effective weight: the base param, plus B·A when an adapter is attached."""
        base = self.params[name]
        ad = self.adapters.get(name)
        if ad is None:
            return base
        return add(base, reshape(ad.delta(), base.shape))

    def named_params(self) -> Iterator[tuple[str, Param]]:
        yield from self.params.items()

    def adapter_params(self) -> list[Param]:
        return [p for ad in self.adapters.values() for p in ad.params()]

    def trainable_params(self) -> list[Param]:
        return [p for p in self.params.values() if p.trainable] + [
            p for p in self.adapter_params() if p.trainable
        ]

    def all_tensors(self) -> dict[str, Param]:
        out = dict(self.params)
        for p in self.adapter_params():
            out[p.name] = p
        return out

    def zero_grad(self) -> None:
        for p in self.all_tensors().values():
            p.grad = None

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # ------------------------------------------------------------ copies
    def clone(self) -> "ModelGraph":
        g = copy.copy(self)
        g.config = copy.deepcopy(self.config)
        g.topology = copy.deepcopy(self.topology)
        g.params = {n: Param(n, p.data, p.trainable) for n, p in self.params.items()}
        g.adapters = {
            h: LowRankAdapter(h, a.rank, Param(a.down.name, a.down.data, a.down.trainable), Param(a.up.name, a.up.data, a.up.trainable))
            for h, a in self.adapters.items()
        }
        g._frozen_flags = dict(self._frozen_flags) if self._frozen_flags is not None else None
        return g

    def astype(self, dtype) -> "ModelGraph":
        g = self.clone()
        for p in g.all_tensors().values():
            p.data = p.data.astype(dtype)
        return g

    def freeze(self, names=None) -> None:
        for n, p in self.params.items():
            if names is None or n in names:
                p.trainable = False

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, p in sorted(self.all_tensors().items()):
            h.update(n.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------ adapters
    def adaptable_hosts(self, prefix: str | None = None) -> list[str]:
        hosts = []
        for layer in self.topology:
            if prefix is not None and not layer.name.startswith(prefix):
                continue
            hosts.extend(layer.adaptable)
        return hosts

    def attach_adapter(self, host: str, rank: int, rng: np.random.Generator, init_std: float = 0.01) -> LowRankAdapter:
        if self.merged:
            raise AdapterError("graph has merged adapters; attach onto a fresh base instead")
        if host not in self.params:
            raise AdapterError(f"adapter host {host!r} does not resolve to a parameter")
        if host in self.adapters:
            raise AdapterError(f"adapter already attached to {host!r}")
        if self._frozen_flags is None:
            self._frozen_flags = {n: p.trainable for n, p in self.params.items()}
            self.freeze()
        ad = LowRankAdapter.create(self.params[host], rank, rng, init_std)
        self.adapters[host] = ad
        return ad

    def detach(self) -> "ModelGraph":
        """Drop every adapter and restore the base trainability flags, in place."""
        if not self.adapters:
            raise AdapterError("graph carries no adapters to detach")
        self.adapters = {}
        for n, flag in (self._frozen_flags or {}).items():
            self.params[n].trainable = flag
        self._frozen_flags = None
        return self

    def merge(self) -> "ModelGraph":
        """New graph with every B·A folded into its host weight and no adapters."""
        if not self.adapters:
            raise AdapterError("graph carries no adapters to merge")
        g = self.clone()
        for host, ad in g.adapters.items():
            p = g.params[host]
            p.data = (p.data + (ad.up.data @ ad.down.data).reshape(p.shape)).astype(p.dtype)
        for n, flag in (g._frozen_flags or {}).items():
            g.params[n].trainable = flag
        g.adapters = {}
        g._frozen_flags = None
        g.merged = True
        return g

    def adapter_param_count(self) -> int:
        return sum(a.num_params for a in self.adapters.values())


def backward(loss: Tensor, graph: ModelGraph | None = None, wrt_input: Tensor | None = None):
    """Clear grads, backpropagate a scalar loss, and return d loss / d input if asked."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if graph is not None:
        graph.zero_grad()
    if wrt_input is not None:
        wrt_input.grad = None
    loss.backward()
    return None if wrt_input is None else wrt_input.grad


class Adam:
    """Adam over a fixed list of params; params without a grad are skipped."""

    def __init__(self, params: list[Param], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.dtype)
