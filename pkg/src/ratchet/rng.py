"""Counter-based random streams.

Every replicate draws from its own Philox stream whose 128-bit key packs
the master seed and the replicate index, so replicates can run in any
order or on any worker and still produce identical numbers.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def seed_stream(master_seed: int, replicate_index: int) -> int:
    """Injective map ``(seed, index) -> 128-bit Philox key``."""
    if not (0 <= master_seed <= _MASK64 and 0 <= replicate_index <= _MASK64):
        raise ValueError("seed and replicate index must fit in 64 unsigned bits")
    return (master_seed << 64) | replicate_index


class Stream:
    """Buffered uniform draws on ``[0, 1)`` from a Philox generator."""

    def __init__(self, key: int, block: int = 2048):
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self._block = block
        self._buf: list[float] = []
        self._pos = 0

    @classmethod
    def for_replicate(cls, master_seed: int, replicate_index: int) -> "Stream":
        return cls(seed_stream(master_seed, replicate_index))

    def uniform(self) -> float:
        if self._pos == len(self._buf):
            self._buf = self._gen.random(self._block).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def exponential(self, rate: float) -> float:
        """Inverse-CDF exponential waiting time."""
        return -math.log1p(-self.uniform()) / rate

    def index(self, n: int) -> int:
        """Uniform integer in ``range(n)``."""
        i = int(self.uniform() * n)
        return i if i < n else n - 1

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p
