"""Stable per-component random streams derived from one seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the component path ``names`` under ``seed``.

    Adding a new component name never shifts the streams of existing ones.
    """
    key = tuple(stream_key(n) if isinstance(n, str) else int(n) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
