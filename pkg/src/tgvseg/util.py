"""Small shared helpers: deterministic RNG splitting."""

import zlib

import numpy as np


def child_rng(seed: int, *tags) -> np.random.Generator:
    """Derive an independent generator from a root seed and a label path.

    Every consumer of randomness (init, dropout, shuffling, augmentation,
    synthesis) gets its own stream keyed by stable string/int tags, so adding
    a consumer never perturbs the draws of another.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    entropy.extend(zlib.crc32(str(t).encode("utf-8")) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(entropy))
