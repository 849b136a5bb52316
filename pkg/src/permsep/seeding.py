"""Stable seed derivation.

Every random draw in the package is seeded through `derive_seed`, which
hashes its arguments with sha256. That keeps runs reproducible across
processes and Python versions (the builtin `hash` is salted per process)
and lets training resume from a checkpoint without serializing RNG state:
the shuffle for epoch k and the dropout mask for example i are pure
functions of (global_seed, k, i).
"""

import hashlib

import numpy as np


def derive_seed(*parts):
    """Map a tuple of ints/strings to a stable seed in [0, 2**63).

    Args:
        *parts: any mix of ints and strings identifying the draw site,
            e.g. ``derive_seed(cfg.seed, "dropout", epoch, idx)``.

    Returns:
        int seed suitable for `numpy.random.default_rng`.
    """
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, (int, np.integer)):
            h.update(b"i" + str(int(p)).encode())
        elif isinstance(p, str):
            h.update(b"s" + p.encode())
        else:
            raise TypeError(f"seed parts must be int or str, got {type(p).__name__}")
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little") >> 1


def rng_for(*parts):
    """Generator seeded by `derive_seed(*parts)`."""
    return np.random.default_rng(derive_seed(*parts))
