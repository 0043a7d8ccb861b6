"""Deterministic random substreams keyed by (seed, purpose, epoch, index)."""
from __future__ import annotations

import numpy as np

# purpose tags keep substreams for different jobs disjoint
AUGMENT = 1
SHUFFLE = 2
DATA_TRAIN = 3
DATA_TEST = 4
DATA_CLASSES = 5


def substream(seed: int, purpose: int, epoch: int = 0, index: int = 0) -> np.random.Generator:
    """Independent generator; identical arguments give identical draws."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=(int(purpose), int(epoch), int(index)))
    return np.random.Generator(np.random.PCG64(ss))
