"""Deterministic seed derivation for every random stream in a run.

Stream tags keep the dataset, partition, split, adapter-init and batch
streams independent; results are therefore schedule- and
parallelism-invariant.
"""

import numpy as np

DATA, PARTITION, SPLIT, LOCAL_INIT, GLOBAL_INIT, BATCHES = range(6)


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from (run_seed, stream_tag, indices...)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def derive_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(parts)))
