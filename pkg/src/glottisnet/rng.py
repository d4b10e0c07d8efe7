"""Seed plumbing: named substreams and counter-based per-sample streams.

All randomness in the pipeline flows from a single seed through named
substreams (init / data / augment), so components can be varied
independently; augmentation draws from a per-sample counter so data-loading
concurrency cannot change results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive_key(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """An independent generator derived from (seed, name)."""
    return np.random.Generator(np.random.Philox(key=_derive_key(seed, name)))


def counter_stream(seed: int, name: str, counter: int) -> np.random.Generator:
    """A generator at a fixed counter position: same (seed, name, counter)
    always yields the same draws regardless of call order."""
    return np.random.Generator(np.random.Philox(key=_derive_key(seed, name), counter=counter))
