"""Seeded random streams.

All randomness goes through :func:`make_rng`, a numpy ``Generator`` on the
PCG64 bit generator. PCG64's output sequence is fixed by numpy's
compatibility policy, so a given seed reproduces bit-identical runs.
"""

import numpy as np


def make_rng(seed, *stream) -> np.random.Generator:
    """Generator for ``seed`` and an optional tuple of sub-stream labels."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for label in stream:
        if isinstance(label, str):
            words.extend(label.encode("utf-8"))
        else:
            words.append(int(label) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
