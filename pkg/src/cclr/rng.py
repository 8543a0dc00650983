"""Keyed random streams.

Every stochastic step draws from a generator seeded by a tuple of keys, so
results do not depend on evaluation order or thread count.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _as_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) % (1 << 64)


def derive_seed(*keys) -> int:
    words = [_as_int(k) for k in keys]
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def torch_generator(*keys) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*keys))


def numpy_generator(*keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*keys))
