"""Pure-Python xoshiro256** kernel, the fallback twin of ``_xoshiro.pyx``.

Both backends implement the identical bit stream: xoshiro256** for output,
splitmix64 for state seeding. The compiled kernel exists purely for speed
(bulk dropout masks, Monte-Carlo sweeps); any divergence between the two
is a bug, and the test suite asserts word-for-word equality.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF

BACKEND = "python"


def splitmix64_next(x: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output word)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, (z ^ (z >> 31)) & MASK64


def seed_state(seed: int) -> np.ndarray:
    """Expand a 64-bit seed into the four xoshiro256** state words."""
    x = seed & MASK64
    words = []
    for _ in range(4):
        x, w = splitmix64_next(x)
        words.append(w)
    return np.array(words, dtype=np.uint64)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def fill_raw(state: np.ndarray, out: np.ndarray) -> None:
    """Fill ``out`` (uint64) with raw xoshiro256** words, advancing ``state``."""
    s0, s1, s2, s3 = (int(w) for w in state)
    n = out.shape[0]
    for i in range(n):
        out[i] = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


def fill_uniform(state: np.ndarray, out: np.ndarray) -> None:
    """Fill ``out`` (float64) with uniforms in [0, 1), advancing ``state``.

    Uses the top 53 bits of each raw word: (word >> 11) * 2**-53.
    """
    s0, s1, s2, s3 = (int(w) for w in state)
    n = out.shape[0]
    scale = 2.0**-53
    for i in range(n):
        r = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        out[i] = (r >> 11) * scale
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
