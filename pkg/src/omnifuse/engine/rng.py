import zlib

import numpy as np


class Rng:
    """Seeded random stream with labeled, order-independent child streams.

    A child produced by ``split(label)`` depends only on the root seed and the
    chain of labels leading to it, never on how many draws the parent made.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed) % (1 << 64)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, label):
        key = zlib.crc32(str(label).encode("utf-8"))
        return Rng(self.seed, self.path + (key,))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"

    # thin delegation; keeps call sites short
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)
