"""Seedable random streams with deterministic, order-independent derivation.

Every source of randomness in the package flows through an `Rng`. Streams
are derived from a base seed plus an integer key path, so e.g. the
generator for Monte Carlo sample t is a function of (base_seed, t) alone
and does not depend on how many other streams were consumed before it.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """A PCG64 generator addressed by (seed, key path)."""

    def __init__(self, seed, key=()):
        if isinstance(seed, (int, np.integer)):
            entropy = int(seed)
        else:
            entropy = [int(s) for s in seed]
        ss = np.random.SeedSequence(entropy=entropy, spawn_key=tuple(int(k) for k in key))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @classmethod
    def stream(cls, base_seed, *key) -> "Rng":
        """Derive the independent stream addressed by `key` under `base_seed`."""
        return cls(base_seed, key)

    def normal(self, shape, std=1.0):
        return (self._gen.standard_normal(size=shape) * std).astype(np.float32)

    def uniform(self, shape=None):
        return self._gen.random(size=shape)

    def integers(self, low, high):
        """One integer drawn uniformly from [low, high)."""
        return int(self._gen.integers(low, high))

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice_weighted(self, weights):
        """Index drawn with probability proportional to `weights`."""
        w = np.asarray(weights, dtype=np.float64)
        p = w / w.sum()
        return int(self._gen.choice(len(w), p=p))
