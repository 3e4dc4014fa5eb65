"""Deterministic, label-derived random substreams.

A :class:`SeedStream` is a root seed plus a path of ``(label, index)``
pairs. Its generator is a counter-based Philox instance keyed by a
``numpy.random.SeedSequence`` built from the whole path, so draws depend
only on the path and never on the order in which other streams were used.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=4).digest(), "little")


@dataclass(frozen=True)
class SeedStream:
    root_seed: int
    path: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if not 0 <= self.root_seed < 2**64:
            raise ValueError("root_seed must fit in an unsigned 64-bit integer")

    def child(self, label: str, index: int = 0) -> "SeedStream":
        return SeedStream(self.root_seed, self.path + ((label, int(index)),))

    def seed_sequence(self) -> np.random.SeedSequence:
        spawn_key = tuple(v for label, index in self.path for v in (_label_key(label), index))
        return np.random.SeedSequence(entropy=self.root_seed, spawn_key=spawn_key)

    def rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.seed_sequence()))

    def int_seed(self) -> int:
        """A 63-bit integer seed for libraries that want a plain integer."""
        return int(self.seed_sequence().generate_state(1, np.uint64)[0] >> np.uint64(1))

    def torch_generator(self) -> torch.Generator:
        return torch.Generator().manual_seed(self.int_seed())
