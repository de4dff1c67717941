"""Deterministic chunked parallel map and reduction.

Work is split into fixed-size chunks independent of the worker count, and
chunk results are combined with a pairwise tree sum in chunk order, so the
floating-point result is bit-identical for any number of threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

DEFAULT_CHUNK_SIZE = 1024

_threads = 1


def set_threads(threads: int) -> None:
    """Set the process-wide worker count used by chunked_map."""
    global _threads
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    _threads = threads
    logger.debug(f"Worker threads set to {threads}")


def chunk_slices(n: int, chunk_size: int = DEFAULT_CHUNK_SIZE) -> List[slice]:
    return [slice(start, min(start + chunk_size, n)) for start in range(0, n, chunk_size)]


def chunked_map(fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
    """Apply fn to every item, preserving order."""
    if _threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=_threads) as pool:
        return list(pool.map(fn, items))


def tree_sum(values: Sequence[T]) -> T:
    """Pairwise sum in a fixed order."""
    if not values:
        raise ValueError("tree_sum of an empty sequence")
    level = list(values)
    while len(level) > 1:
        paired = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0]
