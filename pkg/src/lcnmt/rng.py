"""Counter-based SplitMix64 random numbers.

SplitMix64 advances its state by a fixed odd constant and hashes the state,
so the i-th output is ``mix(seed + (i + 1) * GAMMA)``. That makes whole
blocks of draws computable with vectorised uint64 arithmetic while staying
bit-identical to the sequential generator.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix_int(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *labels) -> int:
    """Deterministically derive a child seed from ``seed`` and string labels."""
    z = seed & _MASK
    for label in labels:
        z = _mix_int((z + zlib.crc32(str(label).encode("utf-8")) * GAMMA) & _MASK)
    return z


class SplitMix64:
    """Sequential SplitMix64 stream with vectorised block draws."""

    def __init__(self, seed: int = 0):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & _MASK
        return _mix_int(self.state)

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GAMMA)
        self.state = (self.state + n * GAMMA) & _MASK
        return _mix_array(states)

    def random(self, size=None):
        """Uniform floats in [0, 1) built from the top 53 bits."""
        n = 1 if size is None else int(np.prod(size))
        out = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(out[0]) if size is None else out.reshape(size)

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller."""
        n = int(np.prod(size))
        half = (n + 1) // 2
        u = self.random(2 * half)
        u1 = 1.0 - u[:half]  # (0, 1]
        u2 = u[half:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * math.pi * u2), r * np.sin(2 * math.pi * u2)])
        return (z[:n] * std).reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high) by 64-bit multiply-shift."""
        span = high - low
        if span <= 0:
            raise ValueError("empty range")
        if size is None:
            return low + ((self.next_u64() * span) >> 64)
        draws = self.u64(int(np.prod(size)))
        out = np.array([low + ((int(d) * span) >> 64) for d in draws], dtype=np.int64)
        return out.reshape(size)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def sample(self, population, k: int) -> list:
        """k items without replacement, returned in population order."""
        if k > len(population):
            raise ValueError("sample larger than population")
        picked = sorted(self.permutation(len(population))[:k])
        return [population[i] for i in picked]
