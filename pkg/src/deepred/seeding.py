"""Labelled random streams derived from one root seed."""
import zlib

import numpy as np


def rng_for(seed, label):
    """Independent generator for ``label``; same (seed, label) -> same stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))
