"""Named, order-independent random streams derived from a global seed."""
from __future__ import annotations

import hashlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return int.from_bytes(hashlib.sha256(str(part).encode()).digest()[:4], "little")


def rng_for(seed, *keys) -> np.random.Generator:
    """Generator for stream ``keys`` under ``seed``.

    Streams with different keys are independent, so adding or removing one
    consumer never shifts another consumer's draws.
    """
    return np.random.default_rng([_key(seed)] + [_key(k) for k in keys])


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
