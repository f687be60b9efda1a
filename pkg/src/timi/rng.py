"""Deterministic counter-based random number generator.

The generator is SplitMix64 used in counter mode: output ``i`` (1-based) is
``mix64(seed + i * GAMMA)`` where ``mix64`` is the standard SplitMix64
finalizer.  The full stream is a pure function of (seed, counter), all
arithmetic is modulo 2^64, and the scheme is a dozen lines in any language,
so identical seeds give identical streams everywhere.

Derived draws are fixed too:

* ``uniforms``: top 53 bits of the raw word, scaled by 2^-53 -> [0, 1).
* ``normals``: Box-Muller on consecutive uniform pairs (u1, u2):
  ``r = sqrt(-2 ln(1 - u1))``, pair = (r cos(2 pi u2), r sin(2 pi u2)).
* ``randint``: raw word modulo the range width (bias < width / 2^64).
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= _MIX1
    x ^= x >> np.uint64(27)
    x *= _MIX2
    x ^= x >> np.uint64(31)
    return x


class Rng:
    """Seeded SplitMix64 stream with uniform / normal / integer draws."""

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words as uint64."""
        ks = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64(self.seed + ks * _GAMMA)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normals(self, n: int) -> np.ndarray:
        """``n`` i.i.d. standard normal doubles (Box-Muller pairs)."""
        m = (n + 1) // 2
        u1 = self.uniforms(m)
        u2 = self.uniforms(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 in (0, 1], log is finite
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]

    def randint(self, lo: int, hi: int) -> int:
        """Integer uniform on [lo, hi)."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        return lo + int(self.raw(1)[0] % np.uint64(hi - lo))

    def choice(self, items):
        return items[self.randint(0, len(items))]


def mix_seeds(a: int, b: int) -> int:
    """Derive one 64-bit seed from two (order-sensitive)."""
    x = np.array([a & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    x *= _GAMMA
    x += np.uint64(b & 0xFFFFFFFFFFFFFFFF)
    return int(_mix64(x)[0])
