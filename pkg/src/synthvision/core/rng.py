"""Seeded random streams.

All randomness flows through :class:`Rng`, a thin wrapper over numpy's PCG64
bit generator. PCG64 and numpy's distribution samplers are specified
bit-for-bit, so a seed plus a call sequence fixes the stream on every
platform. Independent child streams come from ``SeedSequence`` spawning.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed=0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def seed(self):
        return self._seq.entropy

    def random(self, shape=None):
        return self._gen.random(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, shape=None, dtype=np.float64):
        return self._gen.standard_normal(shape, dtype=dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size=None, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def split(self, n: int) -> list["Rng"]:
        """``n`` statistically independent child streams."""
        return [Rng(s) for s in self._seq.spawn(n)]

    def fork(self, *key: int) -> "Rng":
        """Child stream addressed by ``key``; does not advance this stream."""
        return Rng(np.random.SeedSequence(self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + tuple(key)))


def truncated_normal(rng: Rng, shape, std=0.02, bound=2.0, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within +-bound*std."""
    out = rng.normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)
