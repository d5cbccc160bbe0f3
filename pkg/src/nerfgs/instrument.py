"""Process-wide call counters used to verify which branch did the work."""
from __future__ import annotations

from collections import Counter
from contextlib import contextmanager

COUNTERS: Counter = Counter()


def count(name: str, n: int = 1) -> None:
    COUNTERS[name] += n


def reset() -> None:
    COUNTERS.clear()


def snapshot() -> dict[str, int]:
    return dict(COUNTERS)


@contextmanager
def counting():
    """Yield a dict that, on exit, holds the counter deltas for the block."""
    before = Counter(COUNTERS)
    delta: dict[str, int] = {}
    try:
        yield delta
    finally:
        after = Counter(COUNTERS)
        after.subtract(before)
        delta.update({k: v for k, v in after.items() if v})
