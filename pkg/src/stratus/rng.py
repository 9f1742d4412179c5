"""Seeded random streams.

Every stochastic operation draws from numpy's ``PCG64`` bit generator
(PCG-XSL-RR 128/64, O'Neill 2014) seeded through a ``SeedSequence``.  The
bit stream is platform independent; sub-streams are addressed by integer
keys so that, e.g., the weather of one calendar day does not depend on how
many other days were generated.
"""

from __future__ import annotations

import os

import numpy as np

SEED_ENV = "STRATUS_SEED"


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Return the generator for sub-stream ``keys`` of ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def default_seed(fallback: int = 0) -> int:
    value = os.environ.get(SEED_ENV)
    if value is None or value.strip() == "":
        return fallback
    return int(value)
