"""Seeded random streams.

Backed by numpy's PCG64 bit generator (a 128-bit permuted congruential
generator) keyed through ``SeedSequence``. Only the raw uniform stream
(``Generator.random``) and integer draws are used, and every distribution is
derived from those, so sequences are stable across platforms.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int, stream: tuple = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a u64, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.stream)))

    def child(self, *key: int) -> "Rng":
        """An independent stream derived from this seed and ``key``."""
        return Rng(self.seed, self.stream + tuple(key))

    def random(self, size=None) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        return self._gen.random(size)

    def uniform(self, low, high, size=None) -> np.ndarray:
        return low + (high - low) * self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        # Box-Muller on the raw uniform stream
        u1 = 1.0 - self._gen.random(size)
        u2 = self._gen.random(size)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def gumbel(self, size=None) -> np.ndarray:
        """Standard Gumbel(0, 1) samples, -log(-log(u)) with u in (0, 1)."""
        u = self._gen.random(size)
        u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - 2.0**-53)
        return -np.log(-np.log(u))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)
