"""Deterministic path-block parallelism.

Work is split into fixed path blocks whose layout does not depend on the
worker count; results come back in block order, so any reduction over them
is bit-identical for every ``RLQ_THREADS`` setting.
"""
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_BLOCK = 256


def n_workers():
    cap = os.environ.get("RLQ_THREADS")
    cpus = os.cpu_count() or 1
    if cap:
        return max(1, min(int(cap), cpus))
    return cpus


def path_blocks(n_paths, block=DEFAULT_BLOCK):
    """Contiguous ranges of path indices of length ``block`` (last one shorter).

    ``block`` is rounded up to an even number so antithetic pairs never straddle
    two blocks.
    """
    block = max(2, block + (block % 2))
    return [np.arange(lo, min(lo + block, n_paths)) for lo in range(0, n_paths, block)]


def map_blocks(fn, blocks):
    """``[fn(b) for b in blocks]``, possibly on a thread pool."""
    workers = min(n_workers(), len(blocks))
    if workers <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, blocks))
