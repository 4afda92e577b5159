"""
Orchestrates chunked work across worker threads.
Results always come back in chunk order, whatever the scheduling.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, TypeVar

logger = logging.getLogger("DuoField.Runner")

T = TypeVar("T")


def default_threads() -> int:
    return os.cpu_count() or 1


def chunk_bounds(n_items: int, chunk_size: int) -> list[tuple[int, int]]:
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be positive, got {chunk_size}")
    return [(start, min(start + chunk_size, n_items)) for start in range(0, n_items, chunk_size)]


def map_chunks(
    fn: Callable[[int, int], T],
    n_items: int,
    chunk_size: int,
    threads: Optional[int] = None,
) -> list[T]:
    """
    Call fn(start, stop) for every chunk of [0, n_items).
    With threads > 1 the chunks run on a pool; the returned list is in chunk order.
    """
    bounds = chunk_bounds(n_items, chunk_size)
    workers = min(threads or default_threads(), len(bounds)) if bounds else 1
    if workers <= 1:
        return [fn(start, stop) for start, stop in bounds]
    logger.debug(f"Running {len(bounds)} chunks on {workers} threads")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, start, stop) for start, stop in bounds]
        return [f.result() for f in futures]
