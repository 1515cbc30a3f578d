"""Deterministic per-name random generators.

Every tensor that needs random values gets its own generator keyed by the run
seed and the tensor's name, so adding or removing one tensor never shifts the
draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def named_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
