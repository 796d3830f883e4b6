"""Deterministic random numbers from a counter-based splitmix64 generator.

Every source of randomness in the package (parameter init, epoch shuffles,
synthetic data) draws from a `SplitMix64` stream keyed by (seed, stream id),
so a run is a pure function of its seed. The generator is the splitmix64
finalizer applied to an incrementing 64-bit counter, which vectorizes
cleanly over numpy uint64 arrays and has no hidden global state.

Substream ids (documented, fixed):
    STREAM_INIT     parameter initialization
    STREAM_SHUFFLE  epoch shuffling and dataset splits
    STREAM_DATA     synthetic dataset generation
"""

from __future__ import annotations

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MASK = 0xFFFFFFFFFFFFFFFF

STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_DATA = 3


def _mix(z: int) -> int:
    """splitmix64 finalizer on a Python int (used for key derivation)."""
    z = (z + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over a uint64 counter array."""
    with np.errstate(over="ignore"):
        z = z + np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


class SplitMix64:
    """One substream of the run's generator.

    Outputs depend only on (seed, stream, draw index); consecutive calls
    advance the counter, so a stream behaves like a stateful RNG while
    remaining reproducible bit-for-bit.
    """

    def __init__(self, seed: int, stream: int = 0):
        self._base = _mix(_mix(seed & _MASK) ^ _mix(stream & _MASK))
        self._count = 0

    def _next_words(self, n: int) -> np.ndarray:
        counters = np.arange(self._count, self._count + n, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            counters = counters * np.uint64(_GAMMA) + np.uint64(self._base)
        return _mix_array(counters)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1), from the top 53 bits of each word."""
        return (self._next_words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        size = int(np.prod(shape))
        return (low + (high - low) * self.uniforms(size)).reshape(shape)

    def normals(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        size = int(np.prod(shape))
        half = (size + 1) // 2
        # u1 in (0, 1] so the log is finite
        u1 = (self._next_words(half) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * 2.0**-53
        u2 = self.uniforms(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])
        return out[:size].reshape(shape)

    def integers(self, n: int, upper: int) -> np.ndarray:
        """n ints uniform on [0, upper)."""
        return np.minimum((self.uniforms(n) * upper).astype(np.int64), upper - 1)

    def permutation(self, n: int) -> np.ndarray:
        """A permutation of range(n), by sorting one uniform draw per index."""
        return np.argsort(self.uniforms(n), kind="stable")


def stream(seed: int, stream_id: int) -> SplitMix64:
    return SplitMix64(seed, stream_id)
