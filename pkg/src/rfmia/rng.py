"""Stage-scoped random streams.

Every stochastic stage draws from a generator derived from the master seed and
a stage label, so changing one stage never shifts the draws of another.
"""

import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def stage_seed(master_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{int(master_seed) & SEED_MASK}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master_seed: int, stage: str) -> np.random.Generator:
    """Return an independent PCG64 generator for ``stage``."""
    return np.random.Generator(np.random.PCG64(stage_seed(master_seed, stage)))
