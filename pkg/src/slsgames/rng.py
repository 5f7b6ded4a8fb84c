"""Deterministic counter-based random number streams.

All stochastic behaviour in this package (grid parameter sampling, process
and measurement noise) is driven by SplitMix64, a 64-bit counter-based
generator: the n-th output is a fixed avalanche of ``seed + n*GAMMA``, so a
stream is fully determined by its seed and supports cheap independent
substreams by mixing a stream tag into the seed.  Gaussian variates use
Box-Muller so the mapping from uniforms to normals is portable and explicit.

Bit-exact agreement across languages is not a goal; determinism within this
package is.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15

# Stream tags. Keeping parameter draws and the two noise families on separate
# counters means e.g. lengthening a simulation never perturbs the sampled
# grid parameters.
STREAM_PARAMS = 0
STREAM_PROCESS_NOISE = 1
STREAM_MEASUREMENT_NOISE = 2


def _mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


class Stream:
    """One SplitMix64 substream, identified by (seed, stream tag)."""

    def __init__(self, seed: int, stream: int = STREAM_PARAMS):
        self._state = _mix64(((seed & _MASK64) ^ _mix64(stream & _MASK64)))
        self._cached_gauss: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix64(self._state)

    def uniform01(self) -> float:
        # 53-bit mantissa, value in [0, 1)
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform01()

    def gauss(self) -> float:
        """Standard normal via Box-Muller (pairs cached)."""
        if self._cached_gauss is not None:
            g = self._cached_gauss
            self._cached_gauss = None
            return g
        # u1 in (0, 1] so the log is finite
        u1 = 1.0 - self.uniform01()
        u2 = self.uniform01()
        radius = math.sqrt(-2.0 * math.log(u1))
        self._cached_gauss = radius * math.sin(2.0 * math.pi * u2)
        return radius * math.cos(2.0 * math.pi * u2)
