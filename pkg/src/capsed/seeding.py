"""Named, derivable RNG streams.

Every source of randomness in the pipeline draws from a generator derived
from (master seed, stream name, *indices). Streams are independent, so
consuming one (e.g. text dropout) never shifts another (e.g. SpecAugment),
which is what makes trajectory-equivalence guarantees possible.
"""

from __future__ import annotations

import zlib

import numpy as np


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_seed_sequence(master_seed: int, name: str, *indices: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((int(master_seed), _stream_key(name), *[int(i) for i in indices]))


def rng_for(master_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Fresh Generator for stream `name` at position `indices`."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(master_seed, name, *indices)))


def int_seed(master_seed: int, name: str, *indices: int) -> int:
    """Stable 63-bit integer seed, for libraries that want a plain int."""
    return int(derive_seed_sequence(master_seed, name, *indices).generate_state(1, np.uint64)[0] >> 1)
