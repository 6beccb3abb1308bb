"""
Counter-based seed splitting.

Every random stream is keyed by the top-level seed plus a tuple of integer
counters (stream tag, sweep point, realization index, ...). numpy's
SeedSequence hashes the full key, so streams never depend on worker count or
evaluation order.
"""

import numpy as np

# stream tags
DISORDER_STREAM = 1
PERTURBATION_STREAM = 2
JITTER_STREAM = 3
GRADIENT_CHECK_STREAM = 4


def derive_seed(seed, *keys):
    """Returns a 63-bit integer seed for the stream (seed, *keys)."""
    sequence = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))
