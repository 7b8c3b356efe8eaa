"""Random-stream derivation.

All randomness flows from one master seed. Substreams are counter-based
Philox generators keyed by (master seed, salts...): the same derivation is
used by every module, so results never depend on worker count or call order.
"""

from __future__ import annotations

import numpy as np


def substream(master_seed: int, *salts: int) -> np.random.Generator:
    """Independent generator for (master_seed, salts...)."""
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=tuple(int(s) for s in salts))
    return np.random.Generator(np.random.Philox(ss))


# fixed salts, one per consumer, so streams never collide across modules
SALT_SIMULATE = 0x51
SALT_HITTING = 0x52
SALT_EIGS = 0x53
SALT_SAMPLING = 0x54
