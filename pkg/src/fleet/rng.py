"""SplitMix64, the deterministic PRNG behind every seeded operation.

All implementations that share a seed must agree bit for bit, so the exact
published recurrence is used and nothing platform-dependent leaks in.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    """Stream of unsigned 64-bit values from the published SplitMix64 recurrence."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """next() reduced modulo n. The modulo bias is irrelevant here; the
        fixed reduction rule is what keeps independent runs in lockstep."""
        return self.next() % n

    def bytes(self, n: int) -> bytes:
        """n bytes from consecutive outputs, each rendered little-endian."""
        out = bytearray()
        while len(out) < n:
            out += self.next().to_bytes(8, "little")
        return bytes(out[:n])

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates; swap index j = next() mod (i+1), i descending."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


def mix(a: int, b: int) -> int:
    """Derive a child seed: one SplitMix64 step seeded with a XOR (b * GOLDEN)."""
    return SplitMix64((a ^ ((b * GOLDEN) & MASK64)) & MASK64).next()
