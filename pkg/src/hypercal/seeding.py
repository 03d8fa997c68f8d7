"""Counter-based seed derivation.

Every random stream in a pipeline is addressed by a tuple of small integers
(stream tag, dataset, hyperparameter key, run, ...) spawned from one master seed,
so results never depend on the order in which work is scheduled.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

STREAMS = {
    "env": 1,
    "agent": 2,
    "model": 3,
    "collect": 4,
    "behavior": 5,
    "laplace": 6,
    "search": 7,
    "fqi": 8,
    "deploy": 9,
    "baseline": 10,
}


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(master: int, stream: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=(STREAMS[stream], *(int(k) for k in keys)))


def derive_rng(master: int, stream: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stream, *keys))


def content_key(obj) -> int:
    """Stable 63-bit key for a JSON-serialisable object (e.g. a hyperparameter dict)."""
    blob = json.dumps(obj, sort_keys=True, default=float).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1
