"""Keyed random streams.

Every random quantity is drawn from a generator keyed by
``(seed, purpose, *indices)``, so a household's draws do not depend on
how many households are processed, in which order, or on how many
threads do the work.
"""

import numpy as np

# stream purposes
ESTEP = 1
SIM_U = 2
SIM_V = 3
SIM_OMEGA = 4
DIAGNOSTICS = 5
STAGE_DGP = 6
STAGE_MSEM = 7


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed) % 2**64, spawn_key=(purpose, *(int(k) for k in keys)))
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(seed: int, purpose: int) -> int:
    """A 63-bit seed for one pipeline stage, derived from the run seed."""
    seq = np.random.SeedSequence(int(seed) % 2**64, spawn_key=(purpose,))
    return int(seq.generate_state(1, np.uint64)[0] >> np.uint64(1))
