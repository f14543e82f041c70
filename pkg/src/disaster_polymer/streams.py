"""Reproducible random streams.

Every random quantity in the package is drawn from a Philox generator whose
key is derived from ``(master seed, purpose tag, index, ...)`` through
:class:`numpy.random.SeedSequence`.  Two streams with different keys are
statistically independent, and a stream never depends on how many numbers
another stream has consumed, so work can be split across workers in any order
and reduced afterwards without changing results.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Union

import numpy as np

MASK64 = (1 << 64) - 1


def _tag_code(tag: str | int) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError("stream indices must be nonnegative")
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


@dataclass(frozen=True)
class Stream:
    """A node in the tree of random streams."""

    master: int
    path: tuple = ()

    def __post_init__(self):
        if not 0 <= int(self.master) <= MASK64:
            raise ValueError("master seed must be a 64-bit unsigned integer")

    def spawn(self, *keys: str | int) -> "Stream":
        return Stream(self.master, self.path + tuple(keys))

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            entropy=int(self.master), spawn_key=tuple(_tag_code(k) for k in self.path)
        )

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.seed_sequence()))

    @property
    def tag(self) -> str:
        return "/".join(str(k) for k in self.path)

    def provenance(self) -> dict:
        return {"master_seed": int(self.master), "tag": self.tag}


SeedLike = Union[int, Stream]


def as_stream(seed: SeedLike) -> Stream:
    if isinstance(seed, Stream):
        return seed
    if isinstance(seed, (int, np.integer)):
        return Stream(int(seed))
    raise TypeError(f"cannot build a random stream from {type(seed).__name__}")
