"""Seed derivation.

Every random stream is derived from the master seed and a path such as
``("noise", client_id, round)``, so adding a client or a round never shifts
the draws of any other stream.
"""
from __future__ import annotations

import zlib

import numpy as np

MAX_SEED = 2**64 - 1


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return seed


def seed_sequence(master_seed: int, purpose: str, *path: int) -> np.random.SeedSequence:
    spawn_key = (_purpose_code(purpose),) + tuple(int(p) for p in path)
    return np.random.SeedSequence(entropy=check_seed(master_seed), spawn_key=spawn_key)


def derive_rng(master_seed: int, purpose: str, *path: int) -> np.random.Generator:
    """Independent generator for ``(master_seed, purpose, *path)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, purpose, *path)))


def derive_seed(master_seed: int, purpose: str, *path: int) -> int:
    """64-bit integer seed for APIs that take a plain seed."""
    state = seed_sequence(master_seed, purpose, *path).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
