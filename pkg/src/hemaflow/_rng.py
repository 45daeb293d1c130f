"""Counter-seeded random streams, reference implementation.

xoshiro256** with per-replicate state derived through splitmix64.  This copy
works on plain python integers with explicit 64-bit masks and is consumed by
the readable reference stepper; `_kernels` carries a uint64 twin for compiled
code.  The two are held to exact bit equality by tests, which is the whole
point: a replicate simulated by either path sees the same stream.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# 2**-53, exact in binary64.
_INV53 = 1.0 / 9007199254740992.0


def splitmix_draw(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; return (new_state, output word)."""
    state = (state + _GAMMA) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return state, z ^ (z >> 31)


def derive_state(base_seed: int, stream: int) -> list[int]:
    """Four xoshiro256** words for replicate `stream` under `base_seed`.

    Streams are decorrelated by folding (stream + 1) * golden into the seed
    before the splitmix cascade; stream 0 is therefore not the raw seed.
    """
    if not 0 <= base_seed < 2**64:
        raise ValueError("seed must fit in 64 unsigned bits")
    if stream < 0:
        raise ValueError("stream index must be nonnegative")
    s = (base_seed ^ (((stream + 1) * _GAMMA) & _MASK)) & _MASK
    words = []
    for _ in range(4):
        s, w = splitmix_draw(s)
        words.append(w)
    if not any(words):
        # all-zero is the one forbidden xoshiro state
        words[0] = _GAMMA
    return words


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro:
    """Sequential xoshiro256** generator over python integers."""

    __slots__ = ("s",)

    def __init__(self, base_seed: int, stream: int = 0):
        self.s = derive_state(base_seed, stream)

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & _MASK, 7) * 9) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def next_double(self) -> float:
        # top 53 bits, mapped to [0, 1)
        return (self.next_u64() >> 11) * _INV53

    def state_array(self) -> np.ndarray:
        """Current state as uint64[4], the layout the compiled twin uses."""
        return np.array(self.s, dtype=np.uint64)
