"""Counter-based seed derivation for independent, stable RNG streams.

Streams are keyed by content (seed, path, replica index, ...) rather than by
draw order, so adding or removing one work item never perturbs the draws of
any other.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Hash the parts into a 64-bit seed; stable across platforms and runs."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, int):
            h.update(b"i")
            h.update(part.to_bytes(16, "little", signed=True))
        else:
            data = str(part).encode("utf-8")
            h.update(b"s")
            h.update(len(data).to_bytes(8, "little"))
            h.update(data)
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(*parts: int | str) -> np.random.Generator:
    """PCG64 generator seeded from derive_seed(*parts)."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
