"""Hierarchical seed derivation.

Every stochastic component gets its own generator derived from
``(global_seed, component_name, *indices)`` so results do not depend on
execution order or on how replications are scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_seed_sequence(seed: int, name: str, *indices: int) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.SeedSequence([int(seed), _name_key(name), *(int(i) for i in indices)])


def derive_rng(seed: int, name: str, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, name, *indices)))


def derive_int(seed: int, name: str, *indices: int) -> int:
    """A derived 63-bit integer seed, for handing to components that take plain ints."""
    state = derive_seed_sequence(seed, name, *indices).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
