"""Seeded random streams.

Every random quantity in the package is drawn from a numpy ``Generator``
backed by PCG64 and keyed by a ``SeedSequence`` built from the user seed plus
a tuple of integer stream tags. Distinct tags give statistically independent
streams, so e.g. the label permutation and the feature noise of one dataset
never share state, and adding a new consumer does not shift existing draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_tag(name: str) -> int:
    """Stable 32-bit integer tag for a named stream."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def make_rng(seed: int, *tags: int | str) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed)] + [stream_tag(t) if isinstance(t, str) else int(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
