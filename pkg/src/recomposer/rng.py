"""Seedable SplitMix64 generator.

Every stochastic operation in the package draws from this generator so
results are bit-reproducible across platforms and numpy versions.  Draws
are vectorised: a block of ``n`` outputs is the SplitMix64 mix applied to
``state + k * GAMMA`` for ``k = 1..n``, identical to calling the scalar
generator ``n`` times.
"""

from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


class SplitMix64:
    """64-bit shift/multiply generator with an explicit integer seed."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * GAMMA
        self.state = (self.state + n * int(GAMMA)) & _MASK
        return _mix(z)

    def random(self, n: int) -> np.ndarray:
        """``n`` float64 values uniform on [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        shape = tuple(shape) if np.ndim(shape) else (int(shape),)
        n = int(np.prod(shape, dtype=np.int64))
        return (low + (high - low) * self.random(n)).reshape(shape)

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers in [0, high) (multiply-shift, bias below 2**-40)."""
        return np.floor(self.random(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def categorical(self, probs: np.ndarray) -> int:
        """Draw one index from a probability vector (inverse CDF)."""
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        u = self.random(1)[0] * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        return min(idx, len(cdf) - 1)

    def spawn(self) -> "SplitMix64":
        return SplitMix64(int(self.next_u64(1)[0]))
