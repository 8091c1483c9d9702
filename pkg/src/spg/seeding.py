"""Deterministic RNG derivation.

Every source of randomness in a run is a generator derived from
(seed, purpose, index...) via numpy's SeedSequence, so a run resumed
from a task boundary consumes exactly the same streams as an
uninterrupted run.
"""

from __future__ import annotations

import numpy as np

# purpose tags for derived streams
INIT = 0      # initial model parameters
TASK = 1      # per-task training (head init, epoch shuffles)
ONE_MODEL = 2 # per-task fresh models of the ONE reference
PRUNE = 3     # random pruning selections
PROBE = 4     # probe-head initialisation
MTL = 5       # joint-training epoch shuffles


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for stream (seed, *key); stable across runs and platforms."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))
