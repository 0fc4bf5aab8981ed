"""Seeded, domain-separated random streams (SplitMix64 -> xoshiro256**).

A stream is identified by ``(master_seed, label)``. Streams with different
labels are statistically independent, and the same pair reproduces the same
sequence on every platform since only integer arithmetic feeds the state.
"""

import math

import numpy as np

from . import kernels

MASK64 = (1 << 64) - 1
DOMAINS = ("init", "shuffle", "poison", "etf", "corrupt", "data")


def splitmix64(x):
    """One SplitMix64 step. Returns ``(next_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def label_hash(label):
    """FNV-1a over the UTF-8 bytes of ``label``."""
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


class RngStream:
    """xoshiro256** generator keyed by a master seed and a domain label."""

    def __init__(self, master_seed, label="default"):
        master_seed = int(master_seed)
        if not 0 <= master_seed <= MASK64:
            raise ValueError(f"master_seed must fit in 64 bits, got {master_seed}")
        self.master_seed = master_seed
        self.label = str(label)
        x = master_seed ^ label_hash(self.label)
        words = []
        for _ in range(4):
            x, out = splitmix64(x)
            words.append(out)
        if not any(words):  # all-zero state is a fixed point
            words[0] = 1
        self.state = np.array(words, dtype=np.uint64)

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, label={self.label!r})"

    def child(self, suffix):
        """Independent stream for a sub-domain, e.g. ``shuffle/epoch3``."""
        return RngStream(self.master_seed, f"{self.label}/{suffix}")

    def next_u64(self, n):
        out = np.empty(int(n), dtype=np.uint64)
        kernels.xoshiro_fill(self.state, out)
        return out

    def random(self, size=None):
        """Uniform doubles in [0, 1) from the top 53 bits."""
        count = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low, high, size):
        return low + (high - low) * self.random(size)

    def normal(self, size, scale=1.0):
        """Box-Muller normals, two per pair of uniforms."""
        count = int(np.prod(size))
        pairs = (count + 1) // 2
        u = self.random(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return scale * z.reshape(-1)[:count].reshape(size)

    def integers(self, high, size=None):
        """Integers in [0, high)."""
        if high < 1:
            raise ValueError("high must be >= 1")
        u = self.random(1 if size is None else size)
        v = np.minimum((np.asarray(u) * high).astype(np.int64), high - 1)
        return int(v.reshape(-1)[0]) if size is None else v

    def permutation(self, n):
        perm = np.arange(n, dtype=np.int64)
        if n > 1:
            kernels.fisher_yates(perm, self.random(n - 1))
        return perm

    def bernoulli(self, p, size):
        return self.random(size) < p


def derive_seed(master_seed, label):
    """Deterministic 64-bit seed derived from a parent seed and a label."""
    return int(RngStream(master_seed, label).next_u64(1)[0])
