"""Named RNG substreams so pipeline stages never share or perturb each other's draws."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the stream ``name`` under the run seed.

    Streams are independent across names and stable across platforms.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([int(seed), tag])
