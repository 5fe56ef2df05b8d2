"""Portable seeded random numbers.

Every draw comes from the raw 64-bit output of PCG64 (XSL-RR 128/64), whose
bit stream numpy guarantees to be stable across platforms and releases. The
float conversions below are done here rather than through
``numpy.random.Generator`` so they cannot drift between numpy versions:

* uniform: ``(raw >> 11) * 2**-53`` in float64, then scaled and cast.
* normal: Box-Muller on pairs of uniforms, ``sqrt(-2 ln(1-u1)) * cos(2 pi u2)``.
* permutation: stable argsort of fresh raw draws.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *labels: object) -> int:
    """Deterministically mix ``seed`` with labels into a new 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", seed & _MASK64))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return struct.unpack("<Q", h.digest())[0]


class Rng:
    """Seeded generator handle; pass one explicitly to anything stochastic."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed) & _MASK64
        self._bits = np.random.PCG64(self.seed)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"

    def spawn(self, *labels: object) -> "Rng":
        return Rng(derive_seed(self.seed, *labels))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def _unit(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = self._unit(n)
        return (low + (high - low) * u).astype(np.float32).reshape(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = self._unit(2 * n)
        u1, u2 = u[:n], u[n:]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return (std * z).astype(np.float32).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.raw(n), kind="stable").astype(np.int64)
