"""Child-seed derivation for reproducible random streams.

Every random stream in a run (episode sampling, dropout masks, latent noise)
is seeded from ``derive_seed(base_seed, tag, *indices)``.  The mix is a
SplitMix64 finalizer applied to each component in turn, with string tags
hashed by CRC32 so that the mapping is stable across processes and Python
versions (``hash()`` is salted and therefore unusable here).
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(base_seed: int, tag: str, *indices: int) -> int:
    """Mix ``(base_seed, tag, indices...)`` into a 63-bit child seed."""
    h = splitmix64(int(base_seed) & _MASK)
    h = splitmix64(h ^ zlib.crc32(tag.encode("utf-8")))
    for i in indices:
        h = splitmix64(h ^ (int(i) & _MASK))
    return h & ((1 << 63) - 1)


def numpy_rng(base_seed: int, tag: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base_seed, tag, *indices))


def torch_generator(base_seed: int, tag: str, *indices: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(base_seed, tag, *indices))
    return g
