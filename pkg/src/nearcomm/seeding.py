"""Deterministic seed fan-out.

Every source of randomness in the package derives from a single master
seed through ``derive_rng(master, *path)``.  The path is a sequence of
stage tags (strings) and integer indices; tags are mapped to integers by
encoding their UTF-8 bytes, so the derivation is stable across processes
and interpreter runs (no reliance on ``hash()``).  Two calls with the
same ``(master, path)`` always produce the same generator, regardless of
call order or worker count.
"""

from __future__ import annotations

import numpy as np


def _encode(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    if isinstance(part, str):
        return int.from_bytes(part.encode("utf-8"), "little")
    raise TypeError(f"seed path entries must be str or int, got {type(part)!r}")


def seed_sequence(master: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence([_encode(master)] + [_encode(p) for p in path])


def derive_rng(master: int, *path) -> np.random.Generator:
    """Generator for stage ``path`` under ``master``; pure function of both."""
    return np.random.default_rng(seed_sequence(master, *path))


def derive_seed(master: int, *path) -> int:
    """A plain integer child seed (for APIs that take ints)."""
    return int(seed_sequence(master, *path).generate_state(1, np.uint64)[0])
