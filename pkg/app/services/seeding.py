# app/services/seeding.py
"""
Named random sub-streams derived from one experiment seed.

All randomness flows from a single --seed; each consumer asks for its own
stream ("data", "augment", "kmeans", "folds", "init", "plan") plus optional
integer keys, so that e.g. sample i of class c depends only on (seed, c, i).
"""
import zlib
from typing import Dict

import numpy as np

STREAMS = ("data", "augment", "kmeans", "folds", "init", "plan", "sweep")


def _stream_key(name: str) -> int:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(seed: int, name: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(_stream_key(name),) + tuple(int(k) for k in keys))


def rng(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, name, *keys))


def int_seed(seed: int, name: str, *keys: int) -> int:
    return int(seed_sequence(seed, name, *keys).generate_state(1, dtype=np.uint32)[0])


def describe(seed: int) -> Dict[str, int]:
    """Config echo: the first 32-bit word of every named stream."""
    return {name: int_seed(seed, name) for name in STREAMS}
