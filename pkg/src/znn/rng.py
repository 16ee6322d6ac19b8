"""Deterministic random streams.

Every stochastic choice in the package (weight init, dropout masks, batch
shuffling, synthetic records) draws from an `Rng`, so a single integer seed
reproduces a run bit-for-bit.  The generator is counter-based (Philox), which
gives the same stream on every platform and allows cheap, collision-free
derivation of independent substreams.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Seedable counter-based random stream with derivable substreams."""

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._spawn_key = tuple(int(k) for k in _spawn_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, index: int) -> "Rng":
        """Independent substream; the same (seed, index path) always yields the same stream."""
        return Rng(self.seed, self._spawn_key + (index,))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, x: np.ndarray) -> None:
        self._gen.shuffle(x)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._spawn_key})"
