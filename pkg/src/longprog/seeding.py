"""Deterministic rng fan-out: one master seed, named independent streams.

Stream identity = (master, crc32(name), *indices), fed to numpy's
SeedSequence, so adding workers or reordering work units never shifts any
other stream.
"""
from __future__ import annotations

import zlib

import numpy as np


def child_seed(master: int, name: str, *indices: int) -> np.random.SeedSequence:
    if master < 0:
        raise ValueError("master seed must be non-negative")
    return np.random.SeedSequence([master, zlib.crc32(name.encode("utf8")), *indices])


def stream_rng(master: int, name: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, name, *indices))


def stream_int(master: int, name: str, *indices: int) -> int:
    """A 63-bit integer seed derived from the named stream."""
    return int(child_seed(master, name, *indices).generate_state(1, np.uint64)[0] >> 1)
