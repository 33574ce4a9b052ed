"""
Label-keyed random streams.

Every stochastic decision draws from a generator seeded by a label tuple
such as (seed, "di", sample_id, iteration, model_index, copy). Two calls
with equal labels see identical streams regardless of call order, which is
what makes serial and parallel runs agree bit for bit.
"""

import zlib

import numpy as np


def _entropy(label):
    words = []
    for part in label:
        if isinstance(part, (bool, np.bool_)):
            words.append(int(part))
        elif isinstance(part, (int, np.integer)):
            if part < 0:
                raise ValueError(f"RNG label parts must be non-negative, got {part}")
            words.append(int(part))
        elif isinstance(part, str):
            words.append(zlib.crc32(part.encode('utf-8')))
        else:
            raise TypeError(f"Unsupported RNG label part: {part!r}")
    return words


def rng_for(*label):
    """Return a fresh generator for the given label."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(label)))
