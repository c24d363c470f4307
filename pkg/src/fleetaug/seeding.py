"""Deterministic seed derivation for independent random streams."""

import numpy as np


def derive_seed(*keys: int) -> int:
    """Derive a 63-bit seed from integer keys; distinct key tuples give distinct streams."""
    sequence = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
