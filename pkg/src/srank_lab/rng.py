"""Counter-based splitmix64 stream used for parameter initialization.

The k-th output of splitmix64 is a pure function of (seed, k), which lets the
whole stream be generated vectorized while staying bit-identical to the
classic sequential implementation.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Deterministic uint64 stream with uniform and normal float64 views."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def take(self, n: int) -> np.ndarray:
        """Next n raw uint64 words."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix(self._seed + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n uniforms in (0, 1]; the open lower end keeps log() finite."""
        return ((self.take(n) >> np.uint64(11)).astype(np.float64) + 1.0) / 2.0**53

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller on consecutive uniform pairs."""
        pairs = (n + 1) // 2
        u1 = self.uniform(pairs)
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]
