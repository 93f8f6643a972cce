"""Versioned lock-free linked list backing each leaf.

Each key node carries a descending-timestamp chain of value versions; an
update atomically pushes a fresh version at the chain head, and deletion
pushes a reserved tombstone value instead of unlinking anything.  Readers
resolve a timestamp against the chain, which is what makes snapshot range
scans possible.

A version's timestamp starts unset and is stamped (once) with a fresh read
of the global clock after the version becomes reachable; every read path
stamps before it trusts a timestamp.  The moment the stamp lands is the
point at which the update logically takes effect.

Freezing marks every node's ``next`` and then ``vhead`` word, after which
the list is immutable and update attempts report failure so the caller
rebalances first.
"""

from __future__ import annotations

import threading
from typing import Any, Iterator, List, NamedTuple, Optional, Tuple

from . import hooks
from .core import (
    KEY_NEG_INF,
    KEY_POS_INF,
    TOMBSTONE,
    TS_UNSET,
    Marked,
    OpKind,
    unmark,
)

# Distinguished "no version visible at this timestamp" reply from read_at.
ABSENT = object()


class VersionNode:
    """One timestamped value in a key's history."""

    __slots__ = ("value", "ts", "nextv", "seq", "_lock", "__weakref__")

    def __init__(self, value: int, nextv: Optional["VersionNode"] = None):
        self.value = value
        self.ts = TS_UNSET
        self.nextv = nextv
        # Recorder sequence; -1 when effect recording is off.
        self.seq = -1
        self._lock = threading.Lock()

    def cas_ts(self, expect: int, update: int) -> bool:
        with self._lock:
            if self.ts != expect:
                return False
            self.ts = update
            return True

    def cas_nextv(self, expect, update) -> bool:
        with self._lock:
            if self.nextv is not expect:
                return False
            self.nextv = update
            return True

    def __repr__(self) -> str:
        return f"VersionNode(value={self.value}, ts={self.ts})"


def init_timestamp(vnode: VersionNode, current_ts: int) -> None:
    """Stamp an unset version with the given clock reading.  Idempotent.

    Exactly one racer's stamp wins; either way the timestamp is set on
    return and never changes afterwards.
    """
    if vnode.ts == TS_UNSET:
        vnode.cas_ts(TS_UNSET, current_ts)


class KeyNode:
    """A key, its version-chain head word, and its successor word.

    Both words may carry the freeze mark; a marked word never changes
    again (compare-and-set refuses marked words).
    """

    __slots__ = ("key", "vhead", "next", "_lock", "__weakref__")

    def __init__(self, key: int, vhead: VersionNode, next_word=None):
        self.key = key
        self.vhead = vhead
        self.next = next_word
        self._lock = threading.Lock()

    def cas_vhead(self, expect, update, on_success=None) -> bool:
        with self._lock:
            cur = self.vhead
            if type(cur) is Marked or cur is not expect:
                return False
            if on_success is not None:
                on_success()
            self.vhead = update
            return True

    def cas_next(self, expect, update, on_success=None) -> bool:
        with self._lock:
            cur = self.next
            if type(cur) is Marked or cur is not expect:
                return False
            if on_success is not None:
                on_success()
            self.next = update
            return True

    def __repr__(self) -> str:
        return f"KeyNode(key={self.key})"


class ListWrite(NamedTuple):
    """Outcome of a list mutation.

    ``kind`` uses the shared result vocabulary; ``prior`` is the value the
    update displaced (None when a fresh key node was linked), which lets the
    caller tell a genuine update from the revival of a deleted key.
    """

    kind: OpKind
    prior: Optional[int]


WRITE_FAILED = ListWrite(OpKind.FAILED, None)
WRITE_FINISHED = ListWrite(OpKind.OPERATION_FINISHED, None)
WRITE_NOT_PRESENT = ListWrite(OpKind.KEY_NOT_PRESENT, None)


class VersionedList:
    """Sorted singly linked list of key nodes between two sentinels.

    ``clock`` supplies ``current_ts()`` (the version-tracker tail); every
    stamp site re-reads it at the moment of stamping.  ``recorder``, when
    set, is told about every installed version for later snapshot replay.
    """

    __slots__ = ("head", "tail", "_clock", "_recorder")

    def __init__(self, clock, recorder=None):
        head_v = VersionNode(TOMBSTONE)
        head_v.ts = 1
        tail_v = VersionNode(TOMBSTONE)
        tail_v.ts = 1
        self.tail = KeyNode(KEY_POS_INF, tail_v, None)
        self.head = KeyNode(KEY_NEG_INF, head_v, self.tail)
        self._clock = clock
        self._recorder = recorder

    # ------------------------------------------------------------------
    # construction from a frozen predecessor
    # ------------------------------------------------------------------

    @classmethod
    def from_entries(
        cls,
        clock,
        recorder,
        entries: List[Tuple[int, List[Tuple[int, int]]]],
    ) -> "VersionedList":
        """Build an unpublished list from (key, newest-first versions).

        Version tuples are (value, ts) with ts already set; links are plain
        writes because nothing can reach the list yet.
        """
        lst = cls(clock, recorder)
        prev = lst.head
        for key, versions in entries:
            chain: Optional[VersionNode] = None
            for value, ts in reversed(versions):
                vn = VersionNode(value, nextv=chain)
                vn.ts = ts
                chain = vn
            node = KeyNode(key, chain, lst.tail)
            prev.next = node
            prev = node
        return lst

    # ------------------------------------------------------------------
    # traversal
    # ------------------------------------------------------------------

    def find(self, key: int) -> Optional[Tuple[KeyNode, KeyNode]]:
        """Locate (pred, succ) with succ the first node keyed >= key.

        Returns None the moment a marked ``next`` word is seen: the list is
        being frozen and the caller must rebalance before mutating.
        """
        prev = self.head
        while True:
            word = prev.next
            if type(word) is Marked:
                return None
            succ = word
            if succ.key >= key:
                return prev, succ
            prev = succ

    def find_readonly(self, key: int) -> KeyNode:
        """Mark-tolerant locate for read paths; returns the first node >= key."""
        prev = self.head
        while True:
            succ = unmark(prev.next)
            if succ.key >= key:
                return succ
            prev = succ

    def iter_nodes(self) -> Iterator[KeyNode]:
        """Yield real key nodes in order, ignoring freeze marks."""
        node = unmark(self.head.next)
        while node.key != KEY_POS_INF:
            yield node
            node = unmark(node.next)

    def size(self) -> int:
        n = 0
        node = unmark(self.head.next)
        while node.key != KEY_POS_INF:
            n += 1
            node = unmark(node.next)
        return n

    # ------------------------------------------------------------------
    # reads
    # ------------------------------------------------------------------

    def _stamp(self, vnode: VersionNode) -> None:
        if vnode.ts == TS_UNSET:
            init_timestamp(vnode, self._clock.current_ts())

    def read_current(self, node: KeyNode) -> int:
        """Latest value of a key node; may be the tombstone."""
        head = unmark(node.vhead)
        self._stamp(head)
        return head.value

    def read_at(self, node: KeyNode, t: int):
        """Value of the newest version stamped <= t, or ABSENT."""
        v = unmark(node.vhead)
        while v is not None:
            self._stamp(v)
            if v.ts <= t:
                return v.value
            v = v.nextv
        return ABSENT

    def collect_range(self, low: int, high: int, t: int, out: list) -> bool:
        """Append (key, value) visible at t for keys in [low, high].

        Tolerates freeze marks.  Returns True when a real key above the
        range was seen, i.e. no later leaf can contribute.
        """
        node = unmark(self.head.next)
        while True:
            key = node.key
            if key == KEY_POS_INF:
                return False
            if key > high:
                return True
            if key >= low:
                value = self.read_at(node, t)
                if value is not ABSENT and value != TOMBSTONE:
                    out.append((key, value))
            node = unmark(node.next)

    # ------------------------------------------------------------------
    # updates
    # ------------------------------------------------------------------

    def _seq_hook(self, vnode: VersionNode):
        recorder = self._recorder
        if recorder is None:
            return None

        def assign():
            vnode.seq = recorder.next_seq()

        return assign

    def _log_install(self, key: int, vnode: VersionNode) -> None:
        if self._recorder is not None:
            self._recorder.log_install(key, vnode)

    def version_cas(self, node: KeyNode, old_value: int, new_value: int) -> bool:
        """Push a fresh version if the head still holds old_value.

        Re-stamping the displaced head first keeps the visibility rule: no
        value is ever read out of an unstamped version.  Pushing the value
        the head already holds is a no-op success.  A lost race stamps the
        winner's head before reporting failure.
        """
        head = unmark(node.vhead)
        self._stamp(head)
        if head.value != old_value:
            return False
        if head.value == new_value:
            return True
        fresh = VersionNode(new_value, nextv=head)
        hooks.fire("version_cas:before_vhead_cas")
        if node.cas_vhead(head, fresh, self._seq_hook(fresh)):
            self._stamp(fresh)
            self._log_install(node.key, fresh)
            return True
        self._stamp(unmark(node.vhead))
        return False

    def wf_version_cas(
        self,
        node: KeyNode,
        old_value: int,
        new_value: int,
        shared: VersionNode,
        expected_nextv,
        observed_vhead: VersionNode,
    ) -> bool:
        """Install a pre-announced shared version over the observed head.

        The shared node's backlink is claimed by compare-and-set before the
        head swap; losing that claim means another helper already advanced
        it, and touching the head now could splice a version out of the
        chain, so the attempt stops there.

        Unlike :meth:`version_cas` there is no same-value no-op: an
        announced update must leave an installed, stamped node behind,
        otherwise helpers cannot tell that it completed.
        """
        if observed_vhead.value != old_value:
            return False
        hooks.fire("wf_version_cas:before_nextv_cas")
        if not shared.cas_nextv(expected_nextv, observed_vhead):
            return False
        hooks.fire("wf_version_cas:before_vhead_cas")
        if node.cas_vhead(observed_vhead, shared, self._seq_hook(shared)):
            self._stamp(shared)
            self._log_install(node.key, shared)
            return True
        self._stamp(unmark(node.vhead))
        return False

    def insert(self, key: int, value: int) -> ListWrite:
        """Upsert a key: push a version if present, link a node if not.

        Fails (for retry after rebalancing) whenever a freeze mark gets in
        the way.
        """
        while True:
            found = self.find(key)
            if found is None:
                return WRITE_FAILED
            pred, succ = found
            if succ.key == key:
                while True:
                    word = succ.vhead
                    if type(word) is Marked:
                        return WRITE_FAILED
                    head = word
                    self._stamp(head)
                    cur_value = head.value
                    if self.version_cas(succ, cur_value, value):
                        return ListWrite(OpKind.KEY_UPDATED, cur_value)
            else:
                vnode = VersionNode(value)
                node = KeyNode(key, vnode, succ)
                hooks.fire("list_insert:before_link_cas")
                if pred.cas_next(succ, node, self._seq_hook(vnode)):
                    self._stamp(vnode)
                    self._log_install(key, vnode)
                    return ListWrite(OpKind.NEW_KEY_INSERTED, None)
                if type(pred.next) is Marked:
                    return WRITE_FAILED
                # Lost to a neighbouring insert; locate again.

    def insert_tombstone(self, key: int) -> ListWrite:
        """Delete path: push the tombstone over a live value.

        Reports the key as absent both when no node exists and when the
        newest version is already a tombstone, so racing deleters cannot
        both claim the removal.
        """
        while True:
            found = self.find(key)
            if found is None:
                return WRITE_FAILED
            pred, succ = found
            if succ.key != key:
                return WRITE_NOT_PRESENT
            while True:
                word = succ.vhead
                if type(word) is Marked:
                    return WRITE_FAILED
                head = word
                self._stamp(head)
                cur_value = head.value
                if cur_value == TOMBSTONE:
                    return WRITE_NOT_PRESENT
                if self.version_cas(succ, cur_value, TOMBSTONE):
                    return ListWrite(OpKind.KEY_UPDATED, cur_value)

    def wf_insert(
        self,
        key: int,
        value: int,
        state_array,
        tid: int,
        phase: int,
        expect_live: bool = False,
    ) -> ListWrite:
        """Announced upsert driven through the shared per-thread state.

        Any thread (owner or helper) may run this; the shared version node
        is installed at most once.  Three completion signals are honoured
        before every attempt: the finished flag, a phase change in the
        slot (a later announcement replaced ours, so ours is done), and a
        set timestamp on the shared node (it is already installed).  Only
        the first two leave the slot untouched; a set timestamp lets us
        mark the still-current slot finished ourselves.

        ``expect_live`` is the deletion flavour: finding the key logically
        or physically absent completes the operation with "not present"
        instead of manufacturing a tombstoned key.
        """
        while True:
            state = state_array[tid]
            if state is None or state.phase != phase:
                return WRITE_FINISHED
            if state.finished:
                return WRITE_FINISHED
            found = self.find(key)
            if found is None:
                return WRITE_FAILED
            pred, succ = found
            if succ.key == key:
                while True:
                    state = state_array[tid]
                    if state is None or state.phase != phase:
                        return WRITE_FINISHED
                    if state.finished:
                        return WRITE_FINISHED
                    shared = state.vnode
                    expected_nextv = shared.nextv
                    word = succ.vhead
                    head = unmark(word)
                    self._stamp(head)
                    cur_value = head.value
                    hooks.fire("wf_insert:update_pause")
                    if shared.ts != TS_UNSET:
                        state.finished = True
                        return WRITE_FINISHED
                    if type(word) is Marked:
                        return WRITE_FAILED
                    if expect_live and cur_value == TOMBSTONE:
                        state.finished = True
                        return WRITE_NOT_PRESENT
                    if self.wf_version_cas(
                        succ, cur_value, value, shared, expected_nextv, head
                    ):
                        state.finished = True
                        return ListWrite(OpKind.KEY_UPDATED, cur_value)
            else:
                state = state_array[tid]
                if state is None or state.phase != phase:
                    return WRITE_FINISHED
                if state.finished:
                    return WRITE_FINISHED
                shared = state.vnode
                if shared.ts != TS_UNSET:
                    # A helper already linked the key with our node.
                    state.finished = True
                    return WRITE_FINISHED
                if expect_live:
                    # The deletion target is gone from this generation.
                    state.finished = True
                    return WRITE_NOT_PRESENT
                node = KeyNode(key, shared, succ)
                hooks.fire("wf_insert:before_link_cas")
                if pred.cas_next(succ, node, self._seq_hook(shared)):
                    hooks.fire("wf_insert:after_link_cas")
                    self._stamp(shared)
                    self._log_install(key, shared)
                    state.finished = True
                    return ListWrite(OpKind.NEW_KEY_INSERTED, None)
                if type(pred.next) is Marked:
                    return WRITE_FAILED

    # ------------------------------------------------------------------
    # freezing and rebuild support
    # ------------------------------------------------------------------

    def freeze(self) -> None:
        """Mark every node's next then vhead word; cooperative, idempotent.

        After the walk completes (by any combination of threads) the list
        is immutable: updates observe marks and report failure.
        """
        curr = self.head
        while True:
            target = unmark(curr.next)
            if target is None:
                break
            while True:
                word = curr.next
                if type(word) is Marked:
                    break
                hooks.fire("freeze:before_next_mark")
                curr.cas_next(word, Marked(word))
            while True:
                word = curr.vhead
                if type(word) is Marked:
                    break
                hooks.fire("freeze:before_vhead_mark")
                curr.cas_vhead(word, Marked(word))
            curr = target

    def is_frozen(self) -> bool:
        """True once the freeze walk has fully covered the list."""
        node = self.head
        while True:
            word = node.next
            if unmark(word) is None:
                return True
            if type(word) is not Marked or type(node.vhead) is not Marked:
                return False
            node = unmark(word)

    def frozen_entries(
        self, min_active: int
    ) -> List[Tuple[int, List[Tuple[int, int]]]]:
        """Surviving (key, newest-first versions) of a frozen list.

        Per key the chain is cut after the newest version strictly older
        than ``min_active``: anything beyond it is unreachable at every
        active or future scan bound.  A key whose newest version is a
        tombstone older than ``min_active`` is dropped outright.
        """
        entries = []
        for node in self.iter_nodes():
            head = unmark(node.vhead)
            self._stamp(head)
            if head.value == TOMBSTONE and head.ts < min_active:
                continue
            kept = []
            v = head
            while v is not None:
                self._stamp(v)
                kept.append((v.value, v.ts))
                if v.ts < min_active:
                    break
                v = v.nextv
            entries.append((node.key, kept))
        return entries

    def keys(self) -> List[int]:
        return [node.key for node in self.iter_nodes()]

    def first_key(self) -> Optional[int]:
        node = unmark(self.head.next)
        if node.key == KEY_POS_INF:
            return None
        return node.key
