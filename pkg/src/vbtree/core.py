"""Shared primitive vocabulary: keys, values, timestamps, results, marked links.

Keys and values are unsigned 64-bit integers with reserved sentinels at the
extremes; timestamps are signed 64-bit with a single "unset" sentinel.  A
MarkedLink-style word is an ordinary Python reference that may be wrapped in
a :class:`Marked` tag; wrapping and the reference swap happen in one atomic
step, which is what node freezing relies on.

All mutable shared words in this package are updated only through
compare-and-set on lock-backed cells (loads are plain reads, which are atomic
in CPython).  A word that carries the freeze mark is immutable: no
compare-and-set against it ever succeeds.
"""

from __future__ import annotations

import threading
from enum import Enum
from typing import Any, Callable, Optional

# Key space: unsigned 64-bit.  The two extremes are list sentinels and are
# rejected at every public API entry point.
KEY_NEG_INF = 0
KEY_POS_INF = (1 << 64) - 1

# Value space: unsigned 64-bit.  The all-ones value marks a deleted key
# ("the key was removed at this version's timestamp") and is never accepted
# from callers.
TOMBSTONE = (1 << 64) - 1

# Timestamps: assigned stamps are >= 1 and never change once set.
TS_UNSET = -1


class OpKind(Enum):
    """Outcome discriminator for store operations."""

    NEW_KEY_INSERTED = "new_key_inserted"
    KEY_UPDATED = "key_updated"
    KEY_NOT_PRESENT = "key_not_present"
    OPERATION_FINISHED = "operation_finished"
    # Internal only: signals the caller to rebalance and retry.  Never
    # escapes the public API.
    FAILED = "failed"


class OpResult:
    """An operation outcome plus an optional carried value.

    A successful point lookup reports ``OPERATION_FINISHED`` with the found
    value attached; updates report which logical transition happened.
    """

    __slots__ = ("kind", "value")

    def __init__(self, kind: OpKind, value: Optional[int] = None):
        self.kind = kind
        self.value = value

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, OpResult)
            and self.kind is other.kind
            and self.value == other.value
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.value))

    def __repr__(self) -> str:
        if self.value is None:
            return f"OpResult({self.kind.name})"
        return f"OpResult({self.kind.name}, value={self.value})"


RESULT_FAILED = OpResult(OpKind.FAILED)
RESULT_KEY_NOT_PRESENT = OpResult(OpKind.KEY_NOT_PRESENT)
RESULT_NEW_KEY_INSERTED = OpResult(OpKind.NEW_KEY_INSERTED)
RESULT_KEY_UPDATED = OpResult(OpKind.KEY_UPDATED)
RESULT_OPERATION_FINISHED = OpResult(OpKind.OPERATION_FINISHED)


class Marked:
    """Tag wrapper: a link word whose freeze bit is set.

    Identity of the wrapped target is preserved; a freshly marked word and
    its source word reference the same node.
    """

    __slots__ = ("target",)

    def __init__(self, target: Any):
        self.target = target

    def __repr__(self) -> str:
        return f"Marked({self.target!r})"


def mark(word: Any) -> Any:
    """Return the word with its freeze mark set.  Idempotent."""
    if type(word) is Marked:
        return word
    return Marked(word)


def unmark(word: Any) -> Any:
    """Return the word's target, stripping the freeze mark if present."""
    if type(word) is Marked:
        return word.target
    return word


def is_marked(word: Any) -> bool:
    return type(word) is Marked


def is_tombstone(value: int) -> bool:
    return value == TOMBSTONE


def check_user_key(key: int) -> None:
    """Reject out-of-domain keys and the reserved sentinels."""
    if not isinstance(key, int) or key <= KEY_NEG_INF or key >= KEY_POS_INF:
        raise ValueError(f"key must be an integer in [1, 2**64 - 2], got {key!r}")


def check_user_value(value: int) -> None:
    """Reject out-of-domain values and the deletion sentinel."""
    if not isinstance(value, int) or value < 0 or value >= TOMBSTONE:
        raise ValueError(f"value must be an integer in [0, 2**64 - 2], got {value!r}")


class AtomicRef:
    """A single shared reference word with identity-based compare-and-set.

    Loads are bare reads; stores and compare-and-set serialize through a
    private lock.  Compare-and-set against a marked word always fails: a
    frozen link is immutable.
    """

    __slots__ = ("_value", "_lock")

    def __init__(self, value: Any = None):
        self._value = value
        self._lock = threading.Lock()

    def get(self) -> Any:
        return self._value

    def set(self, value: Any) -> None:
        with self._lock:
            self._value = value

    def compare_and_set(
        self,
        expect: Any,
        update: Any,
        on_success: Optional[Callable[[], None]] = None,
    ) -> bool:
        with self._lock:
            current = self._value
            if type(current) is Marked or current is not expect:
                return False
            # Side effects (e.g. recorder sequencing) run before the new
            # word becomes visible so observers order after them.
            if on_success is not None:
                on_success()
            self._value = update
            return True


class AtomicInt:
    """A shared integer with equality-based compare-and-set and counters."""

    __slots__ = ("_value", "_lock")

    def __init__(self, value: int = 0):
        self._value = value
        self._lock = threading.Lock()

    def get(self) -> int:
        return self._value

    def set(self, value: int) -> None:
        with self._lock:
            self._value = value

    def compare_and_set(self, expect: int, update: int) -> bool:
        with self._lock:
            if self._value != expect:
                return False
            self._value = update
            return True

    def increment_and_get(self) -> int:
        with self._lock:
            self._value += 1
            return self._value

    def add(self, delta: int) -> int:
        with self._lock:
            self._value += delta
            return self._value
