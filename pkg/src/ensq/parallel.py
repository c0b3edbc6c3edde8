"""Deterministic fan-out of independent jobs."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")


def run_jobs(fn: Callable[..., T], arg_list: Sequence[tuple], threads: int = 1) -> list[T]:
    """``[fn(*args) for args in arg_list]``, in order; processes when ``threads > 1``."""
    if threads <= 1 or len(arg_list) <= 1:
        return [fn(*args) for args in arg_list]
    with ProcessPoolExecutor(max_workers=min(threads, len(arg_list))) as pool:
        futures = [pool.submit(fn, *args) for args in arg_list]
        return [f.result() for f in futures]
