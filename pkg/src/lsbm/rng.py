"""Seed handling.

Every random quantity in the package is drawn from a ``numpy.random.Generator``
built from an explicit 64-bit seed. Independent streams for Monte-Carlo trials
are derived from ``(master_seed, cell_index, trial_index)`` through
``SeedSequence`` so results never depend on scheduling.
"""

import numpy as np

DEFAULT_SEED = 20140613

_MASK64 = (1 << 64) - 1


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK64))


def derived_rng(master_seed, *indices):
    ss = np.random.SeedSequence([int(master_seed) & _MASK64, *[int(i) for i in indices]])
    return np.random.Generator(np.random.PCG64(ss))


def derived_seed(master_seed, *indices):
    """A 64-bit integer seed for the stream ``(master_seed, *indices)``."""
    ss = np.random.SeedSequence([int(master_seed) & _MASK64, *[int(i) for i in indices]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
