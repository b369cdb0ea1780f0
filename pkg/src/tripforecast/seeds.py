"""Seed fan-out.

Every random stream in a run is derived from one user seed plus a tuple of
string labels, e.g. ``derive_seed(0, "train", "PM4")``. The derivation uses
numpy's SeedSequence with the labels hashed by CRC32, so it is stable
across processes and Python versions.
"""

import zlib

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    key = [zlib.crc32(str(label).encode()) for label in labels]
    ss = np.random.SeedSequence(entropy=int(seed) % 2**64, spawn_key=key)
    return int(ss.generate_state(1, np.uint64)[0])


def rng_for(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))
