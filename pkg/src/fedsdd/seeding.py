"""Deterministic derivation of child seeds from a base seed and a path.

Every stochastic component of a run (partitioning, participant sampling,
per-client batch order, distillation batches, ...) draws from its own
derived seed so that runs are reproducible and sub-components are
decorrelated.  Derivation is a pure function of the base seed and the
path, stable across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base: int, *path: int | str) -> int:
    """Hash (base, *path) into a 64-bit seed."""
    h = hashlib.sha256()
    h.update(str(int(base)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little")


def spawn_rng(base: int, *path: int | str) -> np.random.Generator:
    """Generator seeded by :func:`derive_seed`."""
    return np.random.default_rng(derive_seed(base, *path))
