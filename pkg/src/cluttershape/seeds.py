"""Deterministic seed derivation.

Every random draw in the package flows through one master seed expanded with
np.random.SeedSequence, so a run is reproducible from a single integer.
"""
from __future__ import annotations

import numpy as np


def derive_seed(*entropy: int) -> int:
    """Collapse an entropy tuple into a stable 32-bit seed."""
    return int(np.random.SeedSequence(tuple(int(e) for e in entropy)).generate_state(1)[0])


def derive_rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(tuple(int(e) for e in entropy)))
