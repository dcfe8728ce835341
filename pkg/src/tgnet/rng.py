"""Portable, seedable 64-bit PRNG used wherever results must be reproducible.

The generator is SplitMix64 (Steele, Lea & Flood 2014), chosen because the
whole algorithm fits in a few lines of integer arithmetic and can be
reimplemented bit-for-bit in any language::

    state = (state + 0x9E3779B97F4A7C15) mod 2**64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
    return z ^ (z >> 31)

``split()`` derives an independent child stream by seeding a new generator
with the parent's next output XOR ``0x6A09E667F3BCC909``.

Bounded integers use rejection sampling: draw ``x`` until
``x < 2**64 - (2**64 mod n)`` and return ``x mod n``, so every value in
``[0, n)`` is equally likely.
"""
from __future__ import annotations

from typing import MutableSequence, TypeVar

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_SPLIT_SALT = 0x6A09E667F3BCC909

T = TypeVar("T")


class SplitMix64:
    """SplitMix64 generator over unsigned 64-bit integers."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def split(self) -> "SplitMix64":
        return SplitMix64(self.next_u64() ^ _SPLIT_SALT)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def sample_indices(self, n: int, r: int) -> list[int]:
        """Choose ``r`` distinct indices of ``range(n)`` uniformly.

        Partial Fisher-Yates: position ``i`` is swapped with ``i + below(n - i)``
        for ``i = 0 .. r-1``; the first ``r`` entries are the sample, in draw
        order.
        """
        if not 0 <= r <= n:
            raise ValueError(f"cannot sample {r} of {n}")
        pool = list(range(n))
        for i in range(r):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:r]

    def shuffle(self, items: MutableSequence[T]) -> None:
        n = len(items)
        for i in range(n - 1):
            j = i + self.below(n - i)
            items[i], items[j] = items[j], items[i]
