"""Deterministic random streams.

Every random choice in the engine (parameter init, dropout masks, epoch
shuffles, k-means++ seeding, synthetic data) draws from a Philox
counter-based generator keyed by (seed, stream). Streams are independent,
so adding a consumer never perturbs the draws of existing ones.
"""

import numpy as np

# fixed stream ids, one per consumer
STREAM_INIT = 1
STREAM_DROPOUT = 2
STREAM_SHUFFLE = 3
STREAM_SPLIT = 4
STREAM_SYNTH = 5
STREAM_KMEANS = 6


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Generator for one named stream of a run seed."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream_id)])
    return np.random.Generator(np.random.Philox(key=key))
