"""Named, keyed random streams so results never depend on evaluation order."""

import zlib

import numpy as np


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """
    Build an independent generator for ``(seed, name, *keys)``.

    Args:
        seed: Run-level seed (the CLI ``--seed``)
        name: Stream purpose, e.g. ``"stpr"`` or ``"identity"``
        keys: Further integers such as a step, epoch or identity

    Returns:
        A numpy Generator whose draws depend only on the arguments
    """
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    entropy.extend(int(k) & 0xFFFFFFFF for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))
