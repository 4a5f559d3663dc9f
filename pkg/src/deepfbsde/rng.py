"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, *key)``.  Substreams are
addressed by key rather than by draw order, so the increments for a given
training iteration do not depend on how many numbers other consumers drew.
"""

import numpy as np


class RandomStream:
    def __init__(self, seed, key=()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *key):
        """Independent substream addressed by ``key`` (appended to ours)."""
        return RandomStream(self.seed, self.key + tuple(key))

    def normal(self, size, scale=1.0):
        return self._gen.normal(0.0, 1.0, size=size) * scale

    def uniform(self, low, high, size):
        return self._gen.uniform(low, high, size=size)

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, key={self.key})"
