"""Stable seed derivation for independent random streams.

Every stochastic component (demand, model init, per-round selection,
per-worker shuffles, adversarial payloads, ...) draws from its own generator
seeded by a hash of the master seed plus a purpose tag, so streams never
alias and runs are reproducible across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *tags) -> int:
    """Deterministic 63-bit seed for the (master, *tags) stream."""
    text = repr((int(master),) + tuple(str(t) for t in tags))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def derived_rng(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))
