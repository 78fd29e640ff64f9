"""Deterministic random streams with hash-derived substreams.

Every stochastic choice in the pipeline draws from a SeededRng. Substreams
are derived by hashing the parent seed with string keys (e.g. a patient
id), so results are independent of iteration order and of how much work
runs in parallel.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["SeededRng"]


class SeededRng:
    """PCG64-backed generator; identical seed gives an identical stream on any platform."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *keys) -> "SeededRng":
        """Child stream keyed by (seed, *keys); stable across platforms and schedules."""
        material = "|".join([str(self.seed)] + [str(k) for k in keys])
        digest = hashlib.sha256(material.encode("utf-8")).digest()
        return SeededRng(int.from_bytes(digest[:8], "little"))

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """One float in [lo, hi)."""
        if not lo < hi:
            raise ValueError(f"uniform bounds require lo < hi, got [{lo}, {hi})")
        value = lo + (hi - lo) * self._gen.random()
        if value >= hi:  # guard against rounding at extreme ranges
            value = float(np.nextafter(hi, lo))
        return float(value)

    def integers(self, lo: int, hi: int) -> int:
        """One integer in [lo, hi)."""
        return int(self._gen.integers(lo, hi))

    def poisson(self, lam: float) -> int:
        return int(self._gen.poisson(lam))

    def random(self) -> float:
        return float(self._gen.random())

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, shape, scale: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(dtype)

    def xavier_uniform(self, shape, dtype=np.float32) -> np.ndarray:
        """Xavier/Glorot uniform init for a 2-d weight matrix."""
        if len(shape) != 2:
            raise ValueError(f"xavier_uniform expects a 2-d shape, got {shape}")
        fan_in, fan_out = shape
        bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
        return (self._gen.random(shape) * 2.0 * bound - bound).astype(dtype)
