"""Seedable PRNG used by every stochastic procedure in the package.

The generator is xoshiro256** with splitmix64 seeding, so identical seeds
give identical streams on every platform regardless of numpy version. Each
procedure takes an explicit seed; independent streams (per layer, per
bootstrap replicate, per worker) are obtained by `derive_seed` /
`Rng.child` rather than by sharing one generator across consumers.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from skillmerge._kernels import BACKEND, fill_raw, fill_uniform, seed_state

__all__ = ["Rng", "derive_seed", "BACKEND"]

_MASK64 = 0xFFFFFFFFFFFFFFFF
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def _scramble(x: int) -> int:
    # splitmix64 output function; good 64-bit mixer.
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, *keys: int | str) -> int:
    """Derive a child seed from a base seed and a sequence of keys.

    Keys may be ints or strings; the derivation is deterministic and
    order-sensitive, so ("layers.0.q_proj", "A") and ("A", "layers.0.q_proj")
    give unrelated streams.
    """
    z = _scramble(seed & _MASK64)
    for key in keys:
        k = _fnv1a(key.encode("utf-8")) if isinstance(key, str) else key & _MASK64
        z = _scramble(z ^ k)
    return z


class Rng:
    """Stateful stream over the xoshiro256** generator."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._state = seed_state(self.seed)

    def child(self, *keys: int | str) -> "Rng":
        """Independent generator derived from this one's seed (not its state)."""
        return Rng(derive_seed(self.seed, *keys))

    def raw(self, n: int) -> np.ndarray:
        """n raw uint64 words."""
        out = np.empty(n, dtype=np.uint64)
        fill_raw(self._state, out)
        return out

    def uniform(self, shape: int | Sequence[int] = ()) -> np.ndarray | float:
        """Uniforms in [0, 1); scalar for empty shape."""
        if shape == () or shape is None:
            out = np.empty(1, dtype=np.float64)
            fill_uniform(self._state, out)
            return float(out[0])
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n, dtype=np.float64)
        fill_uniform(self._state, out)
        return out.reshape(shape)

    def normal(self, shape: int | Sequence[int], mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller on the uniform stream."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = np.empty(2 * pairs, dtype=np.float64)
        fill_uniform(self._state, u)
        u1 = u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], log finite
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(2.0 * math.pi * u2)
        z[1::2] = r * np.sin(2.0 * math.pi * u2)
        return (mean + std * z[:n]).reshape(shape)

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("integer() needs n > 0")
        return min(int(self.uniform() * n), n - 1)

    def integers(self, n: int, size: int) -> np.ndarray:
        u = self.uniform((size,))
        return np.minimum((u * n).astype(np.int64), n - 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integer(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        self.shuffle(idx)
        return idx

    def choice(self, items: Sequence, k: int, replace: bool = False) -> list:
        """Sample k items; without replacement by default."""
        if replace:
            return [items[self.integer(len(items))] for _ in range(k)]
        if k > len(items):
            raise ValueError(f"cannot sample {k} from {len(items)} without replacement")
        idx = self.permutation(len(items))[:k]
        return [items[i] for i in idx]

    def sample_indices(self, n: int, k: int) -> list[int]:
        return self.permutation(n)[:k]

    def bernoulli(self, p: float, shape: int | Sequence[int]) -> np.ndarray:
        """Boolean mask, True with probability p. p=1.0 is exactly all-True."""
        return self.uniform(shape) < p


def split_seeds(seed: int, n: int, *tags: int | str) -> list[int]:
    """n child seeds for parallel work (one per worker/replicate)."""
    return [derive_seed(seed, *tags, i) for i in range(n)]
