"""Named random streams derived from one root seed."""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def derive_seed(root: int, name: str, *extra: int) -> int:
    """Stable 63-bit seed for the stream ``name`` (e.g. ``"training.shuffle"``)."""
    ss = np.random.SeedSequence([int(root), stream_key(name), *map(int, extra)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(root: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(root), stream_key(name), *map(int, extra)])
