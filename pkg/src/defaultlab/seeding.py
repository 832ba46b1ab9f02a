"""Named seed derivation.

Every random draw in a run descends from one global seed through a chain of
names, e.g. ``derive_rng(seed, "gbt", window_index)``, so results do not depend
on call order or on how work is scheduled.
"""

import hashlib

import numpy as np


def derive_seed(seed, *names):
    """Deterministic 64-bit seed from a base seed and a path of names."""
    h = hashlib.sha256(str(int(seed)).encode())
    for name in names:
        h.update(b"\x1f")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(seed, *names):
    return np.random.default_rng(derive_seed(seed, *names))
