"""Deterministic sub-seed derivation so parallel and serial work draw identical streams."""

import numpy as np


def derive_seed(*keys: int) -> int:
    """Hash an integer key path (e.g. master seed, graph index, attempt) to a 63-bit seed."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*keys))
