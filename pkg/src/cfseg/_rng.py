"""Deterministic random streams.

All randomness flows from a single 64-bit seed through numpy's
counter-based Philox generator.  Independent streams are derived with
``SeedSequence`` spawn keys, so per-image and per-category work can run
on any number of workers and still reproduce bit for bit.
"""

from __future__ import annotations

import numpy as np

# Spawn-key namespaces. Never renumber: stream identity is part of the
# reproducibility contract.
STREAM_FRACTURE = 1
STREAM_MOCK = 2


def stream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the sub-stream identified by ``path`` under ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
