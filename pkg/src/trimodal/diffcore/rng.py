"""Deterministic random streams keyed by ``(seed, stream id)``."""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0

    def generator(self):
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=(self.stream & (2**64 - 1),))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, stream):
        """Stream derived from this one, independent of its siblings."""
        return RngStream(self.seed, (self.stream * 1_000_003 + int(stream) + 1) % 2**64)


def rng(seed, stream=0):
    return RngStream(int(seed), int(stream)).generator()
