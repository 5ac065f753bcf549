"""Deterministic seed derivation.

Every stochastic step in the pipeline draws from its own child seed derived
from a master seed plus a structural key (round index, prompt index, purpose
tag).  Results are therefore independent of execution order and identical
across resumed and uninterrupted runs.
"""

import hashlib
import json

import numpy as np


def derive_seed(master: int, *key) -> int:
    """Stable 63-bit child seed from a master seed and a structural key."""
    payload = json.dumps([int(master), *key], separators=(",", ":")).encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def derive_rng(master: int, *key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *key))
