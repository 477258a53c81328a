"""Bounded worker pool with deterministic, submission-ordered reduction."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import UsageError

_limit: int | None = None


def set_thread_limit(n: int) -> None:
    global _limit
    if n < 1:
        raise UsageError(f"thread limit must be >= 1, got {n}")
    _limit = n


def thread_limit() -> int:
    if _limit is not None:
        return _limit
    env = os.environ.get("MOSE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"MOSE_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def map_ordered(fn, items):
    """Apply fn to items, results in input order regardless of completion order."""
    items = list(items)
    n = min(thread_limit(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))
