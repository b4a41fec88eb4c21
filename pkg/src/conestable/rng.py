"""Seeded, splittable random number streams.

Every stochastic routine in the package takes an explicit stream so that a
(seed, stream_id) pair pins down the draws exactly, independent of execution
order or chunking of other streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """A named substream of a master seed.

    ``stream_id`` is a tuple of small integers used as a SeedSequence spawn
    key, so distinct ids give statistically independent generators and equal
    ids reproduce identical draws.
    """

    seed: int
    stream_id: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        return np.random.default_rng(ss)

    def child(self, *ids: int) -> "RngStream":
        """Derive a deterministic substream (used per chunk / per path)."""
        return RngStream(self.seed, self.stream_id + tuple(int(i) for i in ids))


def as_stream(rng: "RngStream | int") -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng))
