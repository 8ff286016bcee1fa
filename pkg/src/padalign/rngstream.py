"""Deterministic named random streams.

Every stochastic draw in the toolkit comes from a stream derived from the
root seed plus a tuple of tags (module name, tick, camera id, ...). Any
component can therefore be re-run in isolation and reproduce its draws
exactly, and no module can perturb another module's randomness.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(root_seed: int, *tags) -> np.random.Generator:
    """Return a PCG64 generator keyed by (root_seed, *tags).

    Tags are stringified, so ints and strings can be mixed freely. The same
    (seed, tags) pair always yields an identical draw sequence.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root_seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    key = int.from_bytes(h.digest(), "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(root_seed) & (2**64 - 1), key])))


def derive_seed(root_seed: int, *tags) -> int:
    """Stable 63-bit sub-seed for handing to nested components."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root_seed)).encode())
    for tag in tags:
        h.update(b"|")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little") >> 1
