"""One global seed expanded to independent component streams.

seed(component, index) = first 8 bytes (big endian) of
sha256(f"{global_seed}:{component}:{index}").
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(global_seed: int, component: str, index: int = 0) -> int:
    digest = hashlib.sha256(f"{int(global_seed)}:{component}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(global_seed: int, component: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(global_seed, component, index))
