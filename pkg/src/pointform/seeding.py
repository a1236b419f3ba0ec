"""Stable derivation of child seeds from tuples of integers."""

import numpy as np


def derive_seed(*parts) -> int:
    """Deterministic 32-bit seed from integer parts; platform independent."""
    seq = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(seq.generate_state(1, dtype=np.uint32)[0])
