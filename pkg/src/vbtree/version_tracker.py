"""Global timestamp generation and active-range-query tracking.

The tracker is a lock-free list of range-query registrations ordered by
timestamp.  Its tail timestamp is the store's version clock: every update
stamps its version with a fresh read of the tail.  A range query appends a
node (advancing the clock) and scans strictly below its own entry; the first
unfinished entry bounds which old versions a leaf rebuild may drop.
"""

from __future__ import annotations

from typing import Tuple

from . import hooks
from .core import AtomicRef


class TrackerNode:
    """One range-query registration: its timestamp and completion flag."""

    __slots__ = ("ts", "next", "finished", "__weakref__")

    def __init__(self, ts: int, next_word=None):
        self.ts = ts
        self.next = AtomicRef(next_word)
        self.finished = False

    def __repr__(self) -> str:
        return f"TrackerNode(ts={self.ts}, finished={self.finished})"


# Terminator for the append end of the list; never reachable by traversal
# once replaced.
SENTINEL_LAST = TrackerNode(-1)


class VersionTracker:
    """Lock-free timestamp list with head pruning.

    The list always holds at least one node; a finished genesis node with
    timestamp 1 seeds it, so the first issued timestamp is 2.
    """

    def __init__(self, retire=None):
        genesis = TrackerNode(1, SENTINEL_LAST)
        genesis.finished = True
        self._head = AtomicRef(genesis)
        self._tail = AtomicRef(genesis)
        # Optional callback handed removed nodes for deferred reclamation.
        self._retire = retire

    def current_ts(self) -> int:
        """A fresh read of the tail timestamp (the version clock)."""
        return self._tail.get().ts

    def add_timestamp(self) -> Tuple[int, TrackerNode]:
        """Append a registration with the next timestamp.

        Lock-free tail enqueue: claim the tail's next link, then swing the
        tail.  A loser helps swing the tail before retrying, so the clock
        never stalls behind a parked winner.
        """
        while True:
            tail = self._tail.get()
            node = TrackerNode(tail.ts + 1, SENTINEL_LAST)
            if tail.next.compare_and_set(SENTINEL_LAST, node):
                self._tail.compare_and_set(tail, node)
                return node.ts, node
            hooks.fire("tracker:lost_enqueue")
            # Lost the claim: help swing the tail over the winner's node.
            while True:
                tail = self._tail.get()
                nxt = tail.next.get()
                if nxt is SENTINEL_LAST:
                    break
                self._tail.compare_and_set(tail, nxt)

    def mark_finished(self, node: TrackerNode) -> None:
        """Flag a registration complete.  Idempotent."""
        node.finished = True

    def min_active_ts(self) -> int:
        """Timestamp of the oldest unfinished registration.

        Advances the head past any finished prefix (retiring passed nodes)
        and returns the first unfinished timestamp, or ``current_ts() + 1``
        when every registration has completed.
        """
        while True:
            head = self._head.get()
            if not head.finished:
                return head.ts
            nxt = head.next.get()
            if nxt is SENTINEL_LAST:
                # Everything registered so far has finished.
                return self.current_ts() + 1
            if self._head.compare_and_set(head, nxt):
                if self._retire is not None:
                    self._retire(head)
            # On a lost race some other thread advanced the head; re-read.

    def prunable(self, version_ts: int, is_tombstone_value: bool) -> bool:
        """Whether a deletion version may be dropped by a leaf rebuild."""
        return prunable(version_ts, is_tombstone_value, self.min_active_ts())

    def active_count(self) -> int:
        """Number of registrations not yet passed by the head (diagnostic)."""
        n = 0
        node = self._head.get()
        while node is not SENTINEL_LAST:
            n += 1
            node = node.next.get()
        return n


def prunable(version_ts: int, is_tombstone_value: bool, min_active: int) -> bool:
    """Whether a deletion version is invisible to every active range query.

    A tombstone older than the oldest active registration is already "key
    absent" for every scan that could still run, so a leaf rebuild may drop
    the key outright.
    """
    return is_tombstone_value and version_ts < min_active
