"""Epoch-based deferred reclamation for replaced nodes.

Every public store operation runs under a pinned guard.  Replaced tree
nodes, superseded leaves, and passed tracker nodes are retired rather than
dropped; a retired object is released only once the global epoch has
advanced at least two steps past its retirement epoch, which cannot happen
while any guard pinned at or before that epoch is still live.

"Releasing" here means dropping the reclaimer's strong reference and
counting the release; the interpreter frees the object once the structure
no longer reaches it.  The counters (and weak references in tests) make the
deferral observable.
"""

from __future__ import annotations

import threading
from typing import Any, List, Tuple

from .core import AtomicInt


class Guard:
    """An epoch pin held for the duration of one operation.

    Context manager; reentrant per thread (nested pins share the outermost
    epoch).
    """

    __slots__ = ("_reclaimer", "_slot")

    def __init__(self, reclaimer: "EpochReclaimer", slot: "_ThreadSlot"):
        self._reclaimer = reclaimer
        self._slot = slot

    def __enter__(self) -> "Guard":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self._reclaimer.unpin(self)
        return None


class _ThreadSlot:
    __slots__ = ("depth", "epoch", "retired", "since_check")

    def __init__(self):
        self.depth = 0
        self.epoch = -1  # -1: not pinned
        self.retired: List[Tuple[Any, int]] = []
        self.since_check = 0


class EpochReclaimer:
    """Three-epoch reclaimer with per-thread retire lists."""

    # Try to advance the epoch / release once this many retirements pile up
    # in a thread's local list.
    BATCH = 64

    def __init__(self):
        self._epoch = AtomicInt(0)
        self._local = threading.local()
        self._slots: List[_ThreadSlot] = []
        self._slots_lock = threading.Lock()
        self._pending_ids: set[int] = set()
        self._ids_lock = threading.Lock()
        self.retired_count = AtomicInt(0)
        self.released_count = AtomicInt(0)

    def _slot(self) -> _ThreadSlot:
        slot = getattr(self._local, "slot", None)
        if slot is None:
            slot = _ThreadSlot()
            self._local.slot = slot
            with self._slots_lock:
                self._slots.append(slot)
        return slot

    def pin(self) -> Guard:
        slot = self._slot()
        if slot.depth == 0:
            slot.epoch = self._epoch.get()
        slot.depth += 1
        return Guard(self, slot)

    def unpin(self, guard: Guard) -> None:
        slot = guard._slot
        slot.depth -= 1
        if slot.depth == 0:
            slot.epoch = -1

    def guard(self) -> Guard:
        return self.pin()

    def retire(self, obj: Any) -> None:
        """Queue an unreachable-soon object for deferred release.

        Double-retiring an object that is still pending is a bug in the
        caller and raises.
        """
        oid = id(obj)
        with self._ids_lock:
            if oid in self._pending_ids:
                raise ValueError("object retired twice")
            self._pending_ids.add(oid)
        slot = self._slot()
        slot.retired.append((obj, self._epoch.get()))
        self.retired_count.increment_and_get()
        slot.since_check += 1
        if slot.since_check >= self.BATCH:
            slot.since_check = 0
            self.try_advance()
            self.collect()

    def try_advance(self) -> bool:
        """Advance the global epoch if no pin lags behind it."""
        epoch = self._epoch.get()
        with self._slots_lock:
            slots = list(self._slots)
        for slot in slots:
            if slot.depth > 0 and slot.epoch != -1 and slot.epoch < epoch:
                return False
        return self._epoch.compare_and_set(epoch, epoch + 1)

    def collect(self) -> int:
        """Release this thread's retirements older than two epochs."""
        return self._collect_slot(self._slot())

    def _collect_slot(self, slot: _ThreadSlot) -> int:
        epoch = self._epoch.get()
        keep: List[Tuple[Any, int]] = []
        release: List[Tuple[Any, int]] = []
        for item in slot.retired:
            if item[1] <= epoch - 2:
                release.append(item)
            else:
                keep.append(item)
        if release:
            # Clear the ids while the strong references still exist;
            # otherwise a recycled address could collide with a stale id.
            with self._ids_lock:
                for obj, _ in release:
                    self._pending_ids.discard(id(obj))
            self.released_count.add(len(release))
        slot.retired = keep
        return len(release)

    def flush(self, rounds: int = 4) -> int:
        """Drive epochs forward and release everything eligible.

        Quiescent-only (tests, shutdown): walks every thread's retire list,
        so no workers may be retiring concurrently.  With no pins held, two
        advances make every prior retirement releasable.
        """
        total = 0
        for _ in range(max(2, rounds)):
            self.try_advance()
            with self._slots_lock:
                slots = list(self._slots)
            for slot in slots:
                total += self._collect_slot(slot)
        return total

    def pending_count(self) -> int:
        with self._ids_lock:
            return len(self._pending_ids)

    def current_epoch(self) -> int:
        return self._epoch.get()

    def stats(self) -> dict:
        return {
            "epoch": self._epoch.get(),
            "retired": self.retired_count.get(),
            "released": self.released_count.get(),
            "pending": self.pending_count(),
        }
