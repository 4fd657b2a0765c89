"""Seeded random-number streams with named substreams.

Every stochastic component (init, dropout, gumbel, data generation, ...)
draws from its own substream so that adding draws to one component never
perturbs another.  Identical seed + identical call sequence gives
bit-identical outputs.
"""

from __future__ import annotations

import zlib

import numpy as np


class RngStream:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def substream(self, name: str) -> np.random.Generator:
        """Return the generator for `name`, creating it deterministically."""
        gen = self._streams.get(name)
        if gen is None:
            key = zlib.crc32(name.encode("utf-8"))
            gen = np.random.default_rng(np.random.SeedSequence([self.seed, key]))
            self._streams[name] = gen
        return gen

    def fork(self, index: int) -> "RngStream":
        """Derive an independent stream, e.g. one per worker or session."""
        return RngStream((self.seed * 1_000_003 + index) % (2 ** 63))
