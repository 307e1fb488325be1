"""Per-task random streams.

Every simulation task gets its own generator derived from ``(master_seed,
*task_key)`` so results do not depend on worker count or scheduling order.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("task keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode())


def task_rng(master_seed: int, *task_key) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=tuple(_key_int(k) for k in task_key))
    return np.random.Generator(np.random.PCG64(ss))
