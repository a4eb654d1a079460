"""Seeded random streams keyed by position in a computation.

Every stream is a pure function of ``(seed, *key)``, so work can be moved
between processes without changing any draw.
"""

import numpy as np


def stream(seed, *key):
    """Return a fresh ``numpy.random.Generator`` for ``(seed, *key)``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(seq)
