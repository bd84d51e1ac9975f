"""Deterministic random streams keyed by run coordinates."""

import numpy as np


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; identical keys give identical streams."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))
