"""Counter-based SplitMix64 generator.

The stream is defined entirely here (no dependency on numpy's bit generators),
so a seed reproduces the same draws on every platform and numpy version.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, tag: str) -> int:
    """Independent 64-bit seed for a named sub-stream (FNV-1a of tag, mixed)."""
    h = 0xCBF29CE484222325
    for byte in tag.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    z = np.array([(seed ^ h) & _MASK], dtype=np.uint64)
    return int(_mix(z)[0])


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        counters = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + counters * _GAMMA
        self.state = (self.state + n * int(_GAMMA)) & _MASK
        return _mix(z)

    def random(self, n: int | None = None):
        """Uniform doubles in [0, 1) with 53 random bits."""
        k = 1 if n is None else n
        out = (self.next_u64(k) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return float(out[0]) if n is None else out

    def uniform(self, low: float, high: float, n: int | None = None):
        u = self.random(n)
        return low + (high - low) * u

    def integers(self, high: int, n: int | None = None):
        """Integers in [0, high)."""
        if high <= 0:
            raise ValueError("high must be positive")
        u = self.random(1 if n is None else n)
        out = np.minimum(np.floor(u * high).astype(np.int64), high - 1)
        return int(out[0]) if n is None else out

    def choice(self, items, p=None):
        if p is None:
            return items[self.integers(len(items))]
        cdf = np.cumsum(np.asarray(p, dtype=np.float64))
        idx = int(np.searchsorted(cdf, self.random() * cdf[-1], side="right"))
        return items[min(idx, len(items) - 1)]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for j, i in enumerate(range(n - 1, 0, -1)):
            k = min(int(u[j] * (i + 1)), i)
            perm[i], perm[k] = perm[k], perm[i]
        return perm
