"""Deterministic multiply counters, scoped by model region.

Wallclock on a desk CPU is noisy; multiply counts are not.  Ops call
``count_multiplies`` unconditionally and it is a no-op unless a
``MultiplyCounter`` is active on the current thread.
"""
from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager

_local = threading.local()


class MultiplyCounter:
    def __init__(self):
        self.counts: Counter[str] = Counter()

    def __getitem__(self, scope: str) -> int:
        return self.counts[scope]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __enter__(self) -> "MultiplyCounter":
        stack = getattr(_local, "counters", None)
        if stack is None:
            stack = _local.counters = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.counters.pop()


@contextmanager
def op_scope(name: str):
    """Attribute multiplies inside the block to ``name`` (innermost wins)."""
    stack = getattr(_local, "scopes", None)
    if stack is None:
        stack = _local.scopes = []
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


def count_multiplies(n: int) -> None:
    stack = getattr(_local, "counters", None)
    if not stack:
        return
    scopes = getattr(_local, "scopes", None)
    stack[-1].counts[scopes[-1] if scopes else "other"] += int(n)
