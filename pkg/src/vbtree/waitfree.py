"""Fast-path/slow-path wrapper that makes updates wait-free.

An update first runs the lock-free path; after a configured number of
failed attempts it publishes an announcement (a fresh phase and a
pre-allocated shared version node) in a global per-thread state array and
keeps driving the announced routine until someone finishes it.

Every thread pays helping forward: after a configured number of its own
completed updates it looks at one peer's slot, and if that peer's
announcement has sat unchanged since the last look, it executes the
announced operation to completion itself.  Round-robin scanning makes every
stuck announcement reach every potential helper.

Point lookups and range scans neither announce nor help; they are already
restart-free.
"""

from __future__ import annotations

import threading
from typing import List, Optional

from . import hooks
from .core import (
    AtomicInt,
    OpKind,
    OpResult,
    RESULT_KEY_NOT_PRESENT,
    RESULT_NEW_KEY_INSERTED,
    RESULT_OPERATION_FINISHED,
    TOMBSTONE,
    check_user_key,
    check_user_value,
)
from .tree import LeafNode, TreeConfig, VersionedBTree
from .versioned_list import VersionNode, init_timestamp

# Placeholder for "deletion target not yet resolved" in a state slot.
DUMMY_NODE = object()


class WaitFreeConfig:
    """Knobs for the fast-path/slow-path mechanism."""

    __slots__ = ("fast_path_retries", "helping_period")

    def __init__(self, fast_path_retries: int = 8, helping_period: int = 3):
        if fast_path_retries < 1 or helping_period < 1:
            raise ValueError("fast_path_retries and helping_period must be >= 1")
        self.fast_path_retries = fast_path_retries
        self.helping_period = helping_period


class OperationState:
    """One announced operation: everything a helper needs to finish it.

    ``search_node`` starts as the dummy for deletions and is resolved (by
    compare-and-swap, so all helpers agree) to the target key node or None;
    insertions leave it None throughout.  A deletion is recognisable by its
    shared node carrying the tombstone.
    """

    __slots__ = ("phase", "finished", "vnode", "key", "value", "_search_node", "_lock", "__weakref__")

    def __init__(self, phase: int, key: int, value: int, vnode: VersionNode, is_delete: bool):
        self.phase = phase
        self.finished = False
        self.vnode = vnode
        self.key = key
        self.value = value
        self._search_node = DUMMY_NODE if is_delete else None
        self._lock = threading.Lock()

    @property
    def is_delete(self) -> bool:
        return self.vnode.value == TOMBSTONE

    def search_node(self):
        return self._search_node

    def cas_search_node(self, expect, update) -> bool:
        with self._lock:
            if self._search_node is not expect:
                return False
            self._search_node = update
            return True


class HelpRecord:
    """Thread-local helping schedule: whom to check next, and when."""

    __slots__ = ("curr_tid", "last_phase", "next_check")

    def __init__(self, curr_tid: int, last_phase: int, next_check: int):
        self.curr_tid = curr_tid
        self.last_phase = last_phase
        self.next_check = next_check


class ThreadHandle:
    """A registered slot in the state array plus helping bookkeeping."""

    __slots__ = ("tid", "_phase", "record", "ops_completed")

    def __init__(self, tid: int, record: HelpRecord):
        self.tid = tid
        self._phase = 0
        self.record = record
        self.ops_completed = 0

    def next_phase(self) -> int:
        self._phase += 1
        return self._phase


class WaitFreeStore:
    """Public wait-free ordered map over the lock-free tree.

    Updating threads register for a slot; ``insert`` and ``delete`` take
    the returned handle.  Reads need no registration.
    """

    def __init__(
        self,
        tree_config: Optional[TreeConfig] = None,
        wf_config: Optional[WaitFreeConfig] = None,
        total_threads: int = 64,
        recorder=None,
    ):
        self.tree = VersionedBTree(config=tree_config, recorder=recorder)
        self.config = wf_config or WaitFreeConfig()
        self.total_threads = total_threads
        self.state_array: List[Optional[OperationState]] = [None] * total_threads
        self._registered = [False] * total_threads
        self._reg_lock = threading.Lock()
        self.slow_path_entries = AtomicInt(0)
        self.helps_performed = AtomicInt(0)

    # ------------------------------------------------------------------
    # registration
    # ------------------------------------------------------------------

    def register_thread(self) -> ThreadHandle:
        with self._reg_lock:
            for tid in range(self.total_threads):
                if not self._registered[tid]:
                    self._registered[tid] = True
                    record = HelpRecord(0, self._phase_of(0), self.config.helping_period)
                    return ThreadHandle(tid, record)
        raise RuntimeError("state array is full; raise total_threads")

    def deregister_thread(self, handle: ThreadHandle) -> None:
        with self._reg_lock:
            self.state_array[handle.tid] = None
            self._registered[handle.tid] = False

    def _phase_of(self, tid: int) -> int:
        state = self.state_array[tid]
        return state.phase if state is not None else -1

    # ------------------------------------------------------------------
    # public operations
    # ------------------------------------------------------------------

    def insert(self, handle: ThreadHandle, key: int, value: int) -> OpResult:
        check_user_key(key)
        check_user_value(value)
        return self._execute_update(handle, key, value, is_delete=False)

    def delete(self, handle: ThreadHandle, key: int) -> OpResult:
        check_user_key(key)
        return self._execute_update(handle, key, TOMBSTONE, is_delete=True)

    def search(self, key: int) -> OpResult:
        return self.tree.search(key)

    def range_query(self, low: int, high: int):
        return self.tree.range_query(low, high)

    def get(self, key: int) -> Optional[int]:
        res = self.tree.search(key)
        return res.value if res.kind is OpKind.OPERATION_FINISHED else None

    def validate_structure(self):
        return self.tree.validate_structure()

    def stats(self) -> dict:
        out = self.tree.stats.snapshot()
        out["slow_path_entries"] = self.slow_path_entries.get()
        out["helps_performed"] = self.helps_performed.get()
        out.update(self.tree.node_stats())
        out.update(self.tree.reclaimer.stats())
        return out

    # ------------------------------------------------------------------
    # fast path / slow path
    # ------------------------------------------------------------------

    def _execute_update(self, handle: ThreadHandle, key: int, value: int, is_delete: bool) -> OpResult:
        with self.tree.reclaimer.guard():
            result = self._fast_then_announce(handle, key, value, is_delete)
        self._after_operation(handle)
        return result

    def _fast_then_announce(self, handle, key, value, is_delete) -> OpResult:
        tree = self.tree
        hooks.fire("waitfree:op_start")
        for _ in range(self.config.fast_path_retries):
            hooks.fire("waitfree:attempt")
            if hooks.fire("waitfree:fast_attempt_override"):
                self._service_helping(handle)
                continue
            if is_delete:
                res = tree.delete_attempt(key)
            else:
                res = tree.insert_attempt(key, value)
            if res is not None:
                return res
            # A lost attempt pays helping forward before retrying: whoever
            # beat us may itself be waiting on a parked announcement.
            self._service_helping(handle)
        # Announce and drive the shared routine until performed.
        self.slow_path_entries.increment_and_get()
        phase = handle.next_phase()
        state = OperationState(phase, key, value, VersionNode(value), is_delete)
        self.state_array[handle.tid] = state
        hooks.fire("waitfree:announced")
        return self._run_announced(handle.tid, state, phase, handle)

    def _run_announced(
        self,
        tid: int,
        state: OperationState,
        phase: int,
        handle: Optional[ThreadHandle] = None,
    ) -> OpResult:
        """Drive an announced operation to completion (owner or helper).

        The owner passes its handle so its failed attempts keep servicing
        the helping schedule; helpers do not nest further helping.
        """
        tree = self.tree
        key = state.key
        is_delete = state.is_delete
        while True:
            if state.finished:
                return RESULT_OPERATION_FINISHED
            hooks.fire("waitfree:attempt")
            if is_delete:
                res = tree.update_attempt(
                    key,
                    "delete",
                    lambda leaf: self._wf_delete_leaf(leaf, key, tid, phase),
                    lambda: self._wf_delete_empty(tid, phase),
                )
            else:
                res = tree.update_attempt(
                    key,
                    "insert",
                    lambda leaf: self._wf_insert_leaf(leaf, key, state.value, tid, phase),
                    lambda: self._wf_seed_root(tid, phase),
                )
            if res is not None:
                return res
            if handle is not None:
                self._service_helping(handle)

    # ------------------------------------------------------------------
    # wait-free leaf routines
    # ------------------------------------------------------------------

    def _current_state(self, tid: int, phase: int) -> Optional[OperationState]:
        """The slot's state if it still belongs to this announcement."""
        state = self.state_array[tid]
        if state is None or state.phase != phase:
            return None
        return state

    def _wf_insert_leaf(self, leaf: LeafNode, key: int, value: int, tid: int, phase: int) -> Optional[OpResult]:
        if leaf.frozen:
            return None
        if self.tree._leaf_over_pressure(leaf):
            return None
        write = leaf.list.wf_insert(key, value, self.state_array, tid, phase)
        if write.kind is OpKind.FAILED:
            return None
        if write.kind is OpKind.NEW_KEY_INSERTED:
            leaf.count += 1
        elif write.kind is OpKind.KEY_UPDATED:
            leaf.updates += 1
        return VersionedBTree._map_insert_write(write)

    def _wf_delete_leaf(self, leaf: LeafNode, key: int, tid: int, phase: int) -> Optional[OpResult]:
        """Resolve the deletion target once, then tombstone it by key.

        The resolved target (or its absence) is published in the state
        slot by compare-and-swap so every helper reports the same outcome;
        the actual tombstone install re-locates the key in whatever leaf
        generation is current.
        """
        if leaf.frozen:
            return None
        if self.tree._leaf_over_pressure(leaf):
            return None
        state = self._current_state(tid, phase)
        if state is None or state.finished:
            return RESULT_OPERATION_FINISHED
        target = state.search_node()
        if target is DUMMY_NODE:
            found = leaf.list.find(key)
            if found is None:
                return None
            _, succ = found
            resolved = succ if succ.key == key else None
            hooks.fire("wf_delete:before_publish_target")
            state.cas_search_node(DUMMY_NODE, resolved)
            target = state.search_node()
        if target is None:
            state.finished = True
            return RESULT_KEY_NOT_PRESENT
        write = leaf.list.wf_insert(
            key, TOMBSTONE, self.state_array, tid, phase, expect_live=True
        )
        if write.kind is OpKind.FAILED:
            return None
        if write.kind is OpKind.KEY_NOT_PRESENT:
            return RESULT_KEY_NOT_PRESENT
        if write.kind is OpKind.KEY_UPDATED:
            leaf.updates += 1
            return OpResult(OpKind.KEY_UPDATED)
        return RESULT_OPERATION_FINISHED

    def _wf_seed_root(self, tid: int, phase: int) -> Optional[OpResult]:
        state = self._current_state(tid, phase)
        if state is None or state.finished:
            return RESULT_OPERATION_FINISHED
        shared = state.vnode
        if shared.ts != -1:
            state.finished = True
            return RESULT_OPERATION_FINISHED
        tree = self.tree
        leaf = tree._leaf_with_single(state.key, shared)
        if tree._root.compare_and_set(None, leaf, tree._seq_hook(shared)):
            init_timestamp(shared, tree.tracker.current_ts())
            tree._log_install(state.key, shared)
            state.finished = True
            return RESULT_NEW_KEY_INSERTED
        return None

    def _wf_delete_empty(self, tid: int, phase: int) -> Optional[OpResult]:
        state = self._current_state(tid, phase)
        if state is None or state.finished:
            return RESULT_OPERATION_FINISHED
        state.cas_search_node(DUMMY_NODE, None)
        state.finished = True
        return RESULT_KEY_NOT_PRESENT

    # ------------------------------------------------------------------
    # helping
    # ------------------------------------------------------------------

    def _after_operation(self, handle: ThreadHandle) -> None:
        handle.ops_completed += 1
        self._service_helping(handle)

    def _service_helping(self, handle: ThreadHandle) -> None:
        """Count down to the next helping check; fires per completed
        operation and per failed attempt."""
        record = handle.record
        record.next_check -= 1
        if record.next_check > 0:
            return
        self.check_help(handle)

    def check_help(self, handle: ThreadHandle) -> None:
        """Help the tracked peer if its announcement has not moved on.

        An announcement whose phase still matches the snapshot taken when
        the round-robin pointer landed on it has been pending for a full
        helping period; execute it to completion.  Afterwards advance the
        pointer and snapshot the next peer.
        """
        record = handle.record
        tid = record.curr_tid
        state = self.state_array[tid]
        if (
            tid != handle.tid
            and state is not None
            and state.phase == record.last_phase
            and not state.finished
        ):
            self.helps_performed.increment_and_get()
            with self.tree.reclaimer.guard():
                self._run_announced(tid, state, state.phase)
        record.curr_tid = (tid + 1) % self.total_threads
        record.last_phase = self._phase_of(record.curr_tid)
        record.next_check = self.config.helping_period
