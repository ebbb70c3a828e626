"""Deterministic random-stream derivation.

Every source of randomness in the package is derived from one root seed
through named substreams, so components (splitting, cropping, weight
init, noise synthesis) are independently reproducible: the stream for
``derive_rng(seed, "crop", epoch, index)`` does not depend on how many
draws any other stream consumed.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive_seed_sequence", "derive_rng", "derive_seed"]


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"substream key parts must be int or str, got {type(part)!r}")


def derive_seed_sequence(root_seed: int, *parts) -> np.random.SeedSequence:
    """SeedSequence for the substream named by ``parts`` under ``root_seed``."""
    return np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(_key(p) for p in parts))


def derive_rng(root_seed: int, *parts) -> np.random.Generator:
    """Fresh Generator for the named substream; stateless and reproducible."""
    return np.random.default_rng(derive_seed_sequence(root_seed, *parts))


def derive_seed(root_seed: int, *parts) -> int:
    """A single 32-bit child seed for the named substream."""
    return int(derive_seed_sequence(root_seed, *parts).generate_state(1, np.uint32)[0])
