"""Named deterministic random streams derived from one root seed.

Every source of randomness (fold split, episode sampling, weight init,
dropout, corpus generation) draws from its own named stream so that adding
a consumer never perturbs the others.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF] + list(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy))
