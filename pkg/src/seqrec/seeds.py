"""Deterministic seed derivation.

Every random stream in the toolkit flows from one master seed: derived
streams are named by purpose tags (for example ``("mask", epoch)`` or
``("negatives", split, user)``) so that independent consumers never share or
reorder draws.
"""

import hashlib

import numpy as np

_MASK63 = (1 << 63) - 1


def derive_seed(master: int, *tags: object) -> int:
    """Mix a master seed with purpose tags into a stable 63-bit seed."""
    text = "/".join(str(t) for t in tags)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return (int(master) ^ int.from_bytes(digest[:8], "little")) & _MASK63


def derive_rng(master: int, *tags: object) -> np.random.Generator:
    """A fresh PCG64 generator for the (master, tags) stream."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *tags)))
