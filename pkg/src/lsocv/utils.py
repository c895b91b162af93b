"""Small shared helpers."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def parallel_map(fn, items, threads: int = 1) -> list:
    """Map preserving order; thread-parallel when threads > 1.

    Results are deterministic as long as fn(item) does not depend on
    execution order (each replicate owns its RNG stream).
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent, order-insensitive stream for one replicate of a run."""
    return np.random.default_rng([seed, replicate])
