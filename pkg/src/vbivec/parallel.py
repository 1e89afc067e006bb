"""Segment-level map-reduce used by the E-phases."""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from functools import reduce
from typing import TypeVar

T = TypeVar("T")
R = TypeVar("R")


def map_segments(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Apply ``fn`` to every item; results come back in input order.

    numpy releases the GIL inside its kernels, so threads give real overlap
    on the per-segment linear algebra.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def map_reduce(
    fn: Callable[[T], R],
    items: Sequence[T],
    combine: Callable[[R, R], R],
    initial: R,
    threads: int = 1,
    reproducible: bool = True,
) -> R:
    """Map over items and fold the results with an associative ``combine``.

    With ``reproducible`` the fold runs in input order, so the float result is
    bit-identical across runs and thread counts. Otherwise partial results are
    folded as workers finish.
    """
    if reproducible or threads <= 1 or len(items) <= 1:
        return reduce(combine, map_segments(fn, items, threads), initial)
    acc = initial
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, item) for item in items]
        for future in as_completed(futures):
            acc = combine(acc, future.result())
    return acc


def ordered_sum(values: Iterable[float]) -> float:
    """Sum floats left to right (no pairwise reordering)."""
    total = 0.0
    for v in values:
        total += float(v)
    return total
