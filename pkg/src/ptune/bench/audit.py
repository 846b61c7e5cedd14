"""Read-auditing for held-out splits.

Wrap a split in :class:`AuditedSplit` and every read is logged under the
phase that is active at the time (see :func:`phase`). Tests assert that no
read of a test or full-dev split happens while a ``"train"`` or
``"selection"`` phase is active.
"""

from __future__ import annotations

import contextlib
import threading

_local = threading.local()


def current_phase() -> str:
    return getattr(_local, "phase", "unscoped")


@contextlib.contextmanager
def phase(name: str):
    prev = current_phase()
    _local.phase = name
    try:
        yield
    finally:
        _local.phase = prev


class AuditedSplit(list):
    """A list that records the phase of every element access."""

    def __init__(self, items=(), name: str = "split"):
        super().__init__(items)
        self.name = name
        self.reads: list[str] = []

    def _log(self):
        self.reads.append(current_phase())

    def __getitem__(self, key):
        self._log()
        return super().__getitem__(key)

    def __iter__(self):
        self._log()
        return super().__iter__()

    def phases(self) -> set[str]:
        return set(self.reads)
