"""Seed splitting.

Replica ``i`` of a run with root seed ``root`` draws from
``numpy.random.SeedSequence(entropy=root, spawn_key=(i,))``.  Compiled
kernels take the first 32-bit word of that sequence.  Results therefore
depend only on ``(root, i)``, never on worker count or scheduling order.
"""
from __future__ import annotations

import numpy as np


def seed_sequence(root: int, i: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root), spawn_key=(int(i),))


def replica_seed(root: int, i: int = 0) -> int:
    return int(seed_sequence(root, i).generate_state(1, dtype=np.uint32)[0])


def replica_rng(root: int, i: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(root, i)))
