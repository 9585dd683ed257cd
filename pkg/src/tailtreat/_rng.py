"""Counter-based random streams.

Every replication (or bootstrap draw) gets its own Philox generator keyed by
``(seed, *indices)``, so results do not depend on worker count or on the
order in which parallel tasks finish.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def stream_id(seed: int, *keys: int) -> str:
    return "philox:" + "/".join(str(int(v)) for v in (seed, *keys))
