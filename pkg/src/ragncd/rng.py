"""Replayable 64-bit generator used for k-means++ seeding.

The stream is SplitMix64: the state is a single 64-bit integer initialised
to ``seed mod 2**64``. Each draw adds the golden-ratio increment
``0x9E3779B97F4A7C15`` to the state and returns the state passed through the
mixing function::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

(all arithmetic modulo 2**64). Derived draws:

* ``random()``: ``(next_u64() >> 11) * 2**-53``, a double in [0, 1).
* ``randbelow(n)``: rejection sampling, discarding draws ``>= 2**64 - (2**64 % n)``
  and returning ``draw % n``.

Any implementation following these three rules reproduces the same seeds.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow requires n > 0")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n
