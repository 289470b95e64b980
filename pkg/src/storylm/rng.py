"""Deterministic seed derivation.

All randomness in a run funnels through one integer seed. Consumers
(parameter init, shuffling, distractor sampling, dropout) get their own
stream derived from that seed plus a fixed string label, so adding a new
consumer never perturbs existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 63) - 1


def derive_seed(seed: int, label: str) -> int:
    """Stable sub-seed for `label`; independent of Python's hash randomization."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return ((seed & _MASK) ^ int.from_bytes(digest[:8], "little")) & _MASK


def seeded_rng(seed: int, label: str) -> np.random.Generator:
    """Generator for one named consumer of the run seed."""
    return np.random.default_rng(np.random.SeedSequence([seed & _MASK, derive_seed(seed, label)]))
