"""Data-parallel helpers with results independent of the worker count."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

LEAF_SIZE = 4096  # power of two; fixes the reduction tree topology


def chunk_ranges(n: int, size: int) -> list[tuple[int, int]]:
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def parallel_map(fn: Callable[..., T], items: Sequence, workers: int = 1) -> list[T]:
    """Order-preserving map; ``workers <= 1`` runs inline."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _pairwise(a: np.ndarray) -> np.ndarray:
    """Binary-tree sum along axis 0 with zero padding to a power of two."""
    n = a.shape[0]
    if n == 0:
        return np.zeros(a.shape[1:], dtype=a.dtype)
    size = 1 << (n - 1).bit_length()
    if size != n:
        a = np.concatenate([a, np.zeros((size - n,) + a.shape[1:], dtype=a.dtype)])
    while a.shape[0] > 1:
        a = a[0::2] + a[1::2]
    return a[0]


def tree_sum(a: np.ndarray, workers: int = 1) -> np.ndarray:
    """Sum over axis 0 with a fixed pairwise topology.

    Leaves of ``LEAF_SIZE`` rows are reduced independently (optionally on
    several threads) and their partial sums are combined by the same tree, so
    the result is bit-identical for any worker count.
    """
    a = np.asarray(a)
    n = a.shape[0]
    if n <= LEAF_SIZE:
        return _pairwise(a)
    ranges = chunk_ranges(n, LEAF_SIZE)
    partial = parallel_map(lambda r: _pairwise(a[r[0] : r[1]]), ranges, workers)
    # a short last leaf is zero-padded inside _pairwise, matching the full-tree padding
    return _pairwise(np.stack(partial))
