"""Seed derivation.

Every random stream in wflab is derived from a master seed plus a tuple of
integer keys through a split-mix 64-bit finalizer, so subsets of a corpus or
of a dataset can be regenerated independently of everything else.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *keys: int) -> int:
    """Fold integer keys into ``master``; returns a 64-bit unsigned seed."""
    h = splitmix64(int(master) & MASK64)
    for k in keys:
        h = splitmix64(h ^ (int(k) & MASK64))
    return h


def text_key(text: str) -> int:
    """Stable 64-bit integer for a string key (e.g. an epoch tag)."""
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def rng(master: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
