"""Order-independent seed derivation."""
import hashlib

import numpy as np


def _word(key):
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*keys):
    """Stable 63-bit seed from a tuple of ints and strings."""
    ss = np.random.SeedSequence([_word(k) for k in keys])
    lo, hi = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return (lo | hi << 32) >> 1


def derive_rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([_word(k) for k in keys]))
