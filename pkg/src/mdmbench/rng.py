"""Seeded random streams shared by every stochastic stage.

All randomness in the package flows through Philox, a 64-bit counter-based
generator with published reference vectors, so that a given seed produces
the same stream on every platform. Derived streams are keyed, not split,
which makes per-sample / per-step work order-independent: worker threads
and training resumes reproduce the exact same draws.
"""

import numpy as np


def make_rng(seed):
    """Top-level generator for a run."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def derive_rng(seed, stream):
    """Independent generator keyed by (seed, stream index).

    Used for per-sample and per-step streams: the draws depend only on the
    key, never on how much of any other stream was consumed.
    """
    key = np.array([np.uint64(seed), np.uint64(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
