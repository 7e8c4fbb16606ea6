"""Named, counter-based random number generation.

All randomness in the package flows through here. A root seed plus a path
of string names deterministically selects a Philox stream, so independent
components (scene 3, MC pass 2 of the depth net, ...) draw from
non-overlapping streams that are reproducible across runs and insensitive
to call order elsewhere in the program.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *names: object) -> int:
    """Derive a child seed from a root seed and a path of names.

    Stable across processes and platforms (sha256 based, independent of
    Python's randomized string hashing).
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(seed: int, *names: object) -> np.random.Generator:
    """Return a counter-based generator for the (seed, *names) stream."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *names)))
