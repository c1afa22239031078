"""Deterministic seed fan-out and a tiny jit-friendly generator."""

from __future__ import annotations

import hashlib

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def derive_seed(master: int, *keys) -> int:
    """Map a master seed plus arbitrary labels to a 63-bit child seed.

    Uses a cryptographic hash so the result is stable across processes
    (Python's ``hash`` is salted per interpreter).
    """
    h = hashlib.sha256(str(int(master)).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


@njit(inline="always")
def splitmix_next(state):
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(inline="always")
def open_uniform(state):
    # strictly inside (0, 1)
    return ((splitmix_next(state) >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


@njit(inline="always")
def randbelow(state, n):
    return np.int64(splitmix_next(state) % np.uint64(n))
