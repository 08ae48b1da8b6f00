"""Seeded randomness.

All pipeline randomness flows from a single 64-bit seed. Streams are built on
the PCG64 bit generator (O'Neill's permuted congruential generator, 128-bit
state, the constants documented in numpy.random.PCG64). Bounded integers are
drawn from the raw 64-bit output stream with rejection sampling, so draws
depend only on the documented PCG64 output, not on any distribution-method
implementation.
"""

from __future__ import annotations

import hashlib

import numpy as np

_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def derive_seed(base_seed: int, *components) -> int:
    """Derive a child 64-bit seed from a base seed and labeling components.

    SHA-256 over the colon-joined decimal/string components; first 8 bytes,
    big-endian. Stable across platforms and sessions.
    """
    text = ":".join([str(int(base_seed))] + [str(c) for c in components])
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big")


class Pcg64Stream:
    """Thin deterministic wrapper over the PCG64 raw output stream."""

    def __init__(self, seed: int):
        self._bg = np.random.PCG64(int(seed) & int(_U64))

    def next_u64(self) -> int:
        return int(self._bg.random_raw())

    def bounded(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection from the 64-bit stream."""
        if n <= 0:
            raise ValueError("bound must be positive")
        # largest multiple of n that fits in 2**64
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def generator(self) -> np.random.Generator:
        """numpy Generator sharing this stream's bit generator."""
        return np.random.Generator(self._bg)


def generator_from(seed: int, *components) -> np.random.Generator:
    """Seeded numpy Generator for distribution draws (Poisson, uniform)."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *components)))
