"""Named, keyed random substreams derived from one master seed.

Every stochastic path in a run (dataset draw, stream order, perturbation
noise, selection tie-break, oracle noise, ...) pulls from its own Philox
substream, so changing one knob never shifts the numbers another path sees.
Substreams are counter-keyed: the noise for (step, sample) can be re-derived
by anyone who knows the master seed, which is what the brute-force test
oracles do.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Fixed stream ids; never renumber, or every seeded run changes.
DATASET = 1
STREAM = 2
PERTURBATION = 3
SELECTION = 4
ORACLE = 5
MODEL_INIT = 6
PRETRAIN = 7
REPLAY = 8
GRADCHECK = 9


def substream(master_seed: int, stream_id: int, *key: int) -> np.random.Generator:
    """Generator for one named substream, keyed by up to three indices.

    The key occupies the high counter words, so each (stream, key) pair has a
    full 2^64 draws of private counter space.
    """
    if len(key) > 3:
        raise ValueError("at most three key components")
    k = np.zeros(2, dtype=np.uint64)
    k[0] = master_seed & _MASK64
    k[1] = stream_id
    counter = np.zeros(4, dtype=np.uint64)
    for slot, value in zip((3, 2, 1), key):
        if value < 0:
            raise ValueError("key components must be non-negative")
        counter[slot] = value
    return np.random.Generator(np.random.Philox(key=k, counter=counter))
