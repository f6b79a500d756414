"""Counter-based random stream derivation.

All randomness in a run flows from one root seed. Independent streams are
derived from (root_seed, *path) where the path is a tuple of small integers
naming the consumer — e.g. (STREAM_MISMATCH, step, item, sample) — via
``numpy.random.SeedSequence`` spawn keys. Streams therefore depend only on
their indices, never on execution order or worker count.
"""

import numpy as np

# Stream tags. Fixed for reproducibility; never renumber.
STREAM_BATCH = 1
STREAM_MISMATCH = 2
STREAM_NOISE = 3
STREAM_GUMBEL = 4
STREAM_DATASET = 5
STREAM_CHALLENGE = 6
STREAM_EVAL = 7
STREAM_INIT = 8

__all__ = [
    "rng_for",
    "seed_for",
    "STREAM_BATCH",
    "STREAM_MISMATCH",
    "STREAM_NOISE",
    "STREAM_GUMBEL",
    "STREAM_DATASET",
    "STREAM_CHALLENGE",
    "STREAM_EVAL",
    "STREAM_INIT",
]


def rng_for(root_seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream named by (root_seed, *path)."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


def seed_for(root_seed: int, *path: int) -> int:
    """64-bit integer seed derived from the stream name (for sub-solvers)."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])
