"""Per-replicate random streams.

A replicate is identified by ``(master_seed, replicate)``. Both are hashed
through :class:`numpy.random.SeedSequence` into a 64-bit stream key, which
keys a counter-based Philox generator. No generator state is ever shared
between replicates, so results do not depend on scheduling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Stream:
    key: int

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key & MASK64))


def stream(master_seed: int, replicate: int) -> Stream:
    if master_seed < 0 or replicate < 0:
        raise ValueError("seed and replicate index must be non-negative")
    ss = np.random.SeedSequence(int(master_seed) & MASK64, spawn_key=(int(replicate),))
    return Stream(int(ss.generate_state(1, dtype=np.uint64)[0]))


def streams(master_seed: int, replicates) -> list[Stream]:
    return [stream(master_seed, i) for i in replicates]


def auxiliary(master_seed: int, label: int) -> np.random.Generator:
    """Generator for non-replicate randomness (e.g. choosing test pairs).

    Uses a two-element spawn key, so it never coincides with a replicate
    stream.
    """
    ss = np.random.SeedSequence(int(master_seed) & MASK64, spawn_key=(0xA5, int(label)))
    return np.random.Generator(np.random.Philox(key=int(ss.generate_state(1, np.uint64)[0])))
