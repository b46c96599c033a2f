"""Seeded random streams.

Every stream is a PCG64 generator keyed by ``SeedSequence(seed, spawn_key=keys)``.
The purpose tag is the first key, so independent consumers (shuffling,
partner sampling, init noise, ...) never share state, and a per-sample
stream depends only on (seed, purpose, epoch, sample index), not on batch
composition or worker scheduling.
"""

import numpy as np

# purpose tags; values are part of the reproducibility contract, never renumber
INIT = 1
SHUFFLE = 2
PARTNER = 3
DREAM_NOISE = 4
DATASET = 5
PROBE = 6


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))))
