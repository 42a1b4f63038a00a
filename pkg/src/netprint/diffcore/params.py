from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .rng import SplitMix64, derive_seed


def seeded_init(shape: tuple[int, ...], scheme: str, seed: int) -> np.ndarray:
    """Deterministic tensor from ``(shape, scheme, seed)``.

    ``uniform_glorot`` draws from U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    For conv kernels ``[k, Cin, Cout]`` the fans are ``k*Cin`` and ``k*Cout``.
    """
    shape = tuple(int(n) for n in shape)
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "ones":
        return np.ones(shape)
    if scheme != "uniform_glorot":
        raise ValueError(f"unknown init scheme {scheme!r}")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        receptive = math.prod(shape[:-2])
        fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    n = math.prod(shape)
    return SplitMix64(seed).uniform(-bound, bound, n).reshape(shape)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


class ParamStore:
    """Ordered name -> tensor map. Insertion order is the serialization order."""

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        self.adam = AdamState()

    def add(self, name: str, shape: tuple[int, ...], scheme: str = "uniform_glorot") -> np.ndarray:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already exists")
        arr = seeded_init(shape, scheme, derive_seed(self.rng_seed, name))
        self._tensors[name] = arr
        return arr

    def set(self, name: str, arr: np.ndarray) -> None:
        self._tensors[name] = np.asarray(arr, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore(self.rng_seed)
        for name, arr in self._tensors.items():
            if name.startswith(prefix):
                out._tensors[name] = arr
        return out

    def merged(self, other: "ParamStore") -> "ParamStore":
        out = ParamStore(self.rng_seed)
        out._tensors.update(self._tensors)
        for name, arr in other.items():
            if name in out._tensors:
                raise KeyError(f"parameter {name!r} in both stores")
            out._tensors[name] = arr
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore(self.rng_seed)
        for name, arr in self._tensors.items():
            out._tensors[name] = arr.copy()
        return out

    def num_elements(self) -> int:
        return int(sum(a.size for a in self._tensors.values()))


def adam_step(
    params: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int | None = None,
) -> ParamStore:
    """One bias-corrected Adam update, in place. Moments live on ``params.adam``."""
    state = params.adam
    state.t = state.t + 1 if t is None else t
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        if name not in params:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        params.set(name, params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps))
    return params
