"""Reproducible random streams.

Every stream is a Philox (counter-based) generator keyed by a tuple of
integers, so a draw depends only on its key and its position in the stream,
never on evaluation order across rounds, steps or threads.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *key)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in key)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
