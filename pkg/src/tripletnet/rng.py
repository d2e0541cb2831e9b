"""Seed derivation.  Every random stream is keyed by (master seed, component names)."""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(master: int, *names) -> int:
    """Hash component names into ``master``; stable across runs and platforms."""
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    ss = np.random.SeedSequence(entropy=int(master) & (2**64 - 1), spawn_key=key)
    return int(ss.generate_state(1, np.uint64)[0])


def make_rng(master: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))
