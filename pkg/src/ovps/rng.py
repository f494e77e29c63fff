"""Deterministic RNG streams keyed by integer tuples.

Every stochastic step in the toolkit draws from its own stream so that
per-image work can be reordered or parallelized without changing results.
"""

import numpy as np

# Stream branch tags. Keeping them distinct guarantees that e.g. batch
# sampling never shares a stream with pseudo-label selection.
BATCH_STREAM = 0
PLM_STREAM = 1
WORLD_STREAM = 2

Generator = np.random.Generator


def rng_stream(*key: int) -> np.random.Generator:
    """Return a generator seeded by an integer key tuple.

    Identical keys always produce identical streams, independent of
    platform and of any other stream in the process.
    """
    return np.random.default_rng(np.random.SeedSequence(list(int(k) for k in key)))
