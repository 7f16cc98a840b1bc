"""Seed derivation.

All randomness flows from one root seed. A stream is identified by labels
(``derive_seed(seed, "shuffle", 3)``) rather than by draw order, so adding a
strategy or a stage never shifts another component's stream.
"""
import zlib

import numpy as np


def _label_key(label):
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def derive_seed(root, *labels):
    """Return a 32-bit seed for the stream ``labels`` under ``root``."""
    sequence = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_label_key(l) for l in labels))
    return int(sequence.generate_state(1)[0])


def derive_rng(root, *labels):
    return np.random.default_rng(derive_seed(root, *labels))
