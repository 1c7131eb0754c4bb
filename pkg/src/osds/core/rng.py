"""Seeded, splittable randomness on top of torch generators.

Every draw site derives its own stream (``child``) or advances a per-state
counter, so a pipeline is a pure function of (seed, stream) and any prefix
of it can be replayed bit-exactly from a checkpointed (seed, stream, counter)
triple.
"""

from __future__ import annotations

import torch

DTYPE = torch.float64

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _mix(*parts: int) -> int:
    acc = 0
    for p in parts:
        acc = _splitmix64((acc ^ (p & _MASK64)) & _MASK64)
    return acc


class RngState:
    """A (seed, stream) random source with a replayable draw counter.

    ``child(tag)`` derives a statistically independent stream; successive
    draws on one state advance ``counter``. Identical (seed, stream,
    call-sequence) always produces identical tensors.
    """

    __slots__ = ("seed", "stream", "counter")

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = seed & _MASK64
        self.stream = stream & _MASK64
        self.counter = counter

    def child(self, tag: int) -> "RngState":
        return RngState(self.seed, _mix(self.stream, tag, 0x5EED), 0)

    def _generator(self) -> torch.Generator:
        key = _mix(self.seed, self.stream, self.counter)
        self.counter += 1
        g = torch.Generator()
        g.manual_seed(key & ((1 << 63) - 1))
        return g

    def normal(self, *shape: int) -> torch.Tensor:
        return torch.randn(*shape, generator=self._generator(), dtype=DTYPE)

    def rademacher(self, *shape: int) -> torch.Tensor:
        bits = torch.randint(0, 2, shape, generator=self._generator())
        return bits.to(DTYPE) * 2.0 - 1.0

    def uniform(self, *shape: int) -> torch.Tensor:
        return torch.rand(*shape, generator=self._generator(), dtype=DTYPE)

    def integers(self, low: int, high: int, *shape: int) -> torch.Tensor:
        """Uniform integers in [low, high)."""
        return torch.randint(low, high, shape, generator=self._generator())

    def state(self) -> tuple[int, int, int]:
        return (self.seed, self.stream, self.counter)

    @classmethod
    def from_state(cls, state: tuple[int, int, int]) -> "RngState":
        return cls(*state)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, stream={self.stream}, counter={self.counter})"


def rademacher(rng: RngState, n: int) -> torch.Tensor:
    """Vector of n entries in {-1, +1}."""
    return rng.rademacher(n)


def gaussian(rng: RngState, n: int) -> torch.Tensor:
    """Vector of n standard-normal entries."""
    return rng.normal(n)
