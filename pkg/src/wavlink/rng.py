"""Portable SplitMix64 random streams.

The generator is defined entirely by its constants so any language can
reproduce the same streams:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)

Uniform doubles take the top 53 bits: ``(z >> 11) * 2**-53``. Normals use
Box-Muller on pairs ``(u1, u2)`` with ``u1`` mapped to ``(0, 1]``, emitting
``sqrt(-2 ln u1) * cos(2 pi u2)`` then ``sqrt(-2 ln u1) * sin(2 pi u2)``.
Per-stream seeds are ``mix(master_seed ^ mix(stream_id))`` where ``mix`` is
one SplitMix64 output step applied to its argument.
"""

from __future__ import annotations

import zlib

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """One SplitMix64 step applied to ``value`` (used to derive stream seeds)."""
    with np.errstate(over="ignore"):
        z = np.array([(value + 0x9E3779B97F4A7C15) & _MASK], dtype=np.uint64)
        return int(_finalize(z)[0])


def stream_id(name: str | int) -> int:
    if isinstance(name, int):
        return name & _MASK
    return zlib.crc32(name.encode("utf-8"))


class SplitMix64:
    """Vectorised SplitMix64 stream."""

    def __init__(self, seed: int, stream: str | int = 0):
        self.state = mix64((seed & _MASK) ^ mix64(stream_id(stream)))

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * _GAMMA
            self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK
            return _finalize(z)

    def uniform(self, size) -> np.ndarray:
        n = int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(size)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        n = int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return (scale * z[:n]).reshape(size)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Integers in ``[low, high)`` via multiply-shift on the uniform draw."""
        u = self.uniform(size)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        u = self.uniform(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
