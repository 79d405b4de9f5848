"""Reproducible random streams.

Every stream is a Philox (counter-based) generator whose key is derived from a
root seed plus a tuple of integer identifiers, e.g. ``stream(seed, step, n)``
for datapoint ``n`` at optimizer step ``step``.  Streams with different
identifiers are statistically independent, so work can be split across
workers without changing results.
"""

import numpy as np


def stream(seed, *ids):
    """Return a ``numpy.random.Generator`` keyed by ``(seed, *ids)``."""
    entropy = [int(seed)] + [int(i) for i in ids]
    key = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def as_generator(rng):
    """Accept an int seed, ``None`` or a Generator and return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return np.random.default_rng()
    return stream(rng)


def child_seed(rng):
    """Draw a 63-bit integer suitable for seeding a derived stream."""
    return int(rng.integers(0, 2**63 - 1))
