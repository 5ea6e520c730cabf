"""Counter-based seed derivation.

Every random stream in a run is addressed by ``(master_seed, *counters)`` and
turned into a 64-bit integer through :class:`numpy.random.SeedSequence`, so a
result never depends on how work is scheduled across processes.

Counter layout used by the workflows:

- ``(0, config_id)``: spatial bath configuration
- ``(1, config_id)``: bath-state Monte Carlo stream of that configuration
- ``(2, repeat)``: bootstrap subsample
"""

import numpy as np

BATH_STREAM = 0
MC_STREAM = 1
BOOTSTRAP_STREAM = 2


def derive_seed(master: int, *counters: int) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(c) for c in counters))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


def rng(seed: int, *counters: int) -> np.random.Generator:
    if counters:
        seed = derive_seed(seed, *counters)
    return np.random.default_rng(int(seed))
