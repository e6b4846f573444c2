"""Explicit, splittable random streams.

Streams are numpy's Philox4x64-10 counter-based generator. The key is
derived with ``numpy.random.SeedSequence`` from the 64-bit seed (split into
two 32-bit words, low word first) followed by the split path, so a stream is
fully identified by ``(seed, path)``::

    Rng(7).split(3, 1)  ==  Philox(SeedSequence([7, 0, 3, 1]))

No module in the package touches global random state.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(int(p) for p in path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *self.path]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"

    def split(self, *keys: int) -> "Rng":
        """Independent child stream; does not advance this one."""
        return Rng(self.seed, self.path + tuple(keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def integers(self, low: int, high: int) -> int:
        """Uniform integer on ``[low, high)``."""
        return int(self._gen.integers(low, high))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self) -> float:
        return float(self._gen.random())

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int) -> int:
        return int(self._gen.integers(0, n))
