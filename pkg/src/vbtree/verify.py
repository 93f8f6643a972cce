"""Correctness machinery: oracle, histories, linearizability, snapshots.

Four pieces:

* a deterministic sequential oracle for single-threaded equivalence runs;
* a history recorder plus a bounded exhaustive linearizability checker
  (memoized search over linearization orders that respect real time);
* an effect recorder that timestamps every installed version so a
  concurrent run's range results can be replayed against a reconstructed
  snapshot;
* stress drivers, structural audits, and the forced interleavings that
  pin the announced-update races.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from . import hooks
from .core import AtomicInt, OpKind, OpResult, TOMBSTONE, unmark
from .tree import TreeConfig, VersionedBTree
from .versioned_list import VersionNode, VersionedList
from .version_tracker import VersionTracker
from .waitfree import OperationState, WaitFreeConfig, WaitFreeStore

# ---------------------------------------------------------------------------
# sequential oracle
# ---------------------------------------------------------------------------


class SequentialOracle:
    """Reference map semantics with a timestamped effect log."""

    def __init__(self):
        self._map: Dict[int, int] = {}
        self.log: List[Tuple[str, int, Optional[int]]] = []

    def insert(self, key: int, value: int) -> OpResult:
        self.log.append(("insert", key, value))
        if key in self._map:
            self._map[key] = value
            return OpResult(OpKind.KEY_UPDATED)
        self._map[key] = value
        return OpResult(OpKind.NEW_KEY_INSERTED)

    def delete(self, key: int) -> OpResult:
        self.log.append(("delete", key, None))
        if key in self._map:
            del self._map[key]
            return OpResult(OpKind.KEY_UPDATED)
        return OpResult(OpKind.KEY_NOT_PRESENT)

    def search(self, key: int) -> OpResult:
        if key in self._map:
            return OpResult(OpKind.OPERATION_FINISHED, self._map[key])
        return OpResult(OpKind.KEY_NOT_PRESENT)

    def range_query(self, low: int, high: int) -> List[Tuple[int, int]]:
        return sorted((k, v) for k, v in self._map.items() if low <= k <= high)

    def items(self) -> List[Tuple[int, int]]:
        return sorted(self._map.items())


# ---------------------------------------------------------------------------
# history recording and linearizability
# ---------------------------------------------------------------------------


class HistoryOp(NamedTuple):
    """One completed operation with its invocation/response order."""

    op_id: int
    tid: int
    op: str  # insert | delete | search | range
    args: tuple
    result: object
    inv: int
    res: int


class BoundsExceeded(ValueError):
    pass


@dataclass
class Verdict:
    ok: bool
    witness: Optional[List[int]] = None
    violating_prefix: Optional[List[HistoryOp]] = None


MAX_THREADS = 4
MAX_OPS = 24
MAX_KEYSPACE = 8


def _apply(op: HistoryOp, state: dict, check_result: bool) -> Optional[dict]:
    """Oracle transition for one op; None when the result cannot match."""
    kind = op.op
    if kind == "insert":
        key, value = op.args
        present = key in state
        if check_result and op.result not in (
            "OPERATION_FINISHED",
            "KEY_UPDATED" if present else "NEW_KEY_INSERTED",
        ):
            return None
        new = dict(state)
        new[key] = value
        return new
    if kind == "delete":
        (key,) = op.args
        present = key in state
        if check_result and op.result not in (
            "OPERATION_FINISHED",
            "KEY_UPDATED" if present else "KEY_NOT_PRESENT",
        ):
            return None
        if not present:
            return state
        new = dict(state)
        del new[key]
        return new
    if kind == "search":
        (key,) = op.args
        if check_result:
            expected = ("found", state[key]) if key in state else ("absent",)
            if op.result != expected:
                return None
        return state
    if kind == "range":
        low, high = op.args
        if check_result:
            expected = tuple(
                sorted((k, v) for k, v in state.items() if low <= k <= high)
            )
            if op.result != expected:
                return None
        return state
    raise ValueError(f"unknown op {kind}")


def _search_linearization(
    completed: Sequence[HistoryOp],
    pending: Sequence[HistoryOp],
    initial: dict,
) -> Optional[List[int]]:
    """Find a result-respecting order extending real time, or None.

    Completed operations must linearize with their observed results;
    pending ones (used only for prefix diagnostics) may linearize with any
    effect or not at all.
    """
    ops = list(completed) + list(pending)
    completed_ids = {op.op_id for op in completed}
    by_id = {op.op_id: op for op in ops}
    memo = set()

    def state_key(linearized: frozenset, state: dict):
        return linearized, tuple(sorted(state.items()))

    def dfs(linearized: frozenset, state: dict, order: List[int]) -> Optional[List[int]]:
        if completed_ids <= linearized:
            return order
        key = state_key(linearized, state)
        if key in memo:
            return None
        memo.add(key)
        remaining = [op for op in ops if op.op_id not in linearized]
        min_res = min(
            (op.res for op in remaining if op.op_id in completed_ids),
            default=None,
        )
        for op in remaining:
            # Real-time: op may go next only if no other unlinearized
            # completed op responded before op was invoked.
            if min_res is not None and op.inv > min_res:
                continue
            is_completed = op.op_id in completed_ids
            new_state = _apply(op, state, check_result=is_completed)
            if new_state is None:
                continue
            found = dfs(linearized | {op.op_id}, new_state, order + [op.op_id])
            if found is not None:
                return found
        return None

    return dfs(frozenset(), dict(initial), [])


def check_linearizable(history: Sequence[HistoryOp], initial: Optional[dict] = None) -> Verdict:
    """Exhaustive (memoized) linearizability check at small bounds.

    Sound and complete for histories of at most 4 threads, 24 operations
    and 8 distinct keys; raises BoundsExceeded above that.
    """
    history = list(history)
    if len(history) > MAX_OPS:
        raise BoundsExceeded(f"history of {len(history)} ops exceeds {MAX_OPS}")
    tids = {op.tid for op in history}
    if len(tids) > MAX_THREADS:
        raise BoundsExceeded(f"{len(tids)} threads exceeds {MAX_THREADS}")
    keys = set()
    for op in history:
        if op.op in ("insert", "delete", "search"):
            keys.add(op.args[0])
    if len(keys) > MAX_KEYSPACE:
        raise BoundsExceeded(f"{len(keys)} keys exceeds {MAX_KEYSPACE}")

    initial = initial or {}
    witness = _search_linearization(history, [], initial)
    if witness is not None:
        return Verdict(ok=True, witness=witness)
    return Verdict(
        ok=False, violating_prefix=_minimal_violating_prefix(history, initial)
    )


def _minimal_violating_prefix(history: Sequence[HistoryOp], initial: dict) -> List[HistoryOp]:
    """Shortest response-prefix of the history that already fails."""
    by_res = sorted(history, key=lambda op: op.res)
    for k in range(1, len(by_res) + 1):
        cutoff = by_res[k - 1].res
        completed = [op for op in history if op.res <= cutoff]
        pending = [op for op in history if op.inv < cutoff < op.res]
        if _search_linearization(completed, pending, initial) is None:
            return sorted(completed + pending, key=lambda op: op.inv)
    return list(history)


class HistoryRecorder:
    """Concurrent-writer-safe invocation/response log."""

    def __init__(self):
        self._seq = AtomicInt(0)
        self._ops: List[HistoryOp] = []
        self._lock = threading.Lock()
        self._next_id = AtomicInt(0)

    def record(self, tid: int, op: str, args: tuple, runner) -> object:
        """Run ``runner()`` between two sequence fences and log it."""
        op_id = self._next_id.increment_and_get()
        inv = self._seq.increment_and_get()
        result = runner()
        res = self._seq.increment_and_get()
        encoded = encode_result(op, result)
        with self._lock:
            self._ops.append(HistoryOp(op_id, tid, op, args, encoded, inv, res))
        return result

    def history(self) -> List[HistoryOp]:
        with self._lock:
            return sorted(self._ops, key=lambda op: op.inv)


def encode_result(op: str, result) -> object:
    if op == "search":
        if result.kind is OpKind.OPERATION_FINISHED:
            return ("found", result.value)
        return ("absent",)
    if op == "range":
        return tuple(result)
    return result.kind.name


# ---------------------------------------------------------------------------
# effect recording and snapshot reconstruction
# ---------------------------------------------------------------------------


class EffectRecorder:
    """Per-install log enabling snapshot replay of a concurrent run.

    A global sequence number is assigned inside the successful swap, so for
    any single key the sequence order equals the version-chain order even
    when clock stamps tie.
    """

    def __init__(self):
        self._seq = AtomicInt(0)
        self._local = threading.local()
        self._buffers: List[list] = []
        self._range_buffers: List[list] = []
        self._lock = threading.Lock()

    def next_seq(self) -> int:
        return self._seq.increment_and_get()

    def _buffer(self) -> list:
        buf = getattr(self._local, "buf", None)
        if buf is None:
            buf = []
            self._local.buf = buf
            with self._lock:
                self._buffers.append(buf)
        return buf

    def _range_buffer(self) -> list:
        buf = getattr(self._local, "rbuf", None)
        if buf is None:
            buf = []
            self._local.rbuf = buf
            with self._lock:
                self._range_buffers.append(buf)
        return buf

    def log_install(self, key: int, vnode: VersionNode) -> None:
        self._buffer().append((key, vnode))

    def log_range(self, low: int, high: int, bound: int, result: tuple) -> None:
        self._range_buffer().append((low, high, bound, result))

    def collect_updates(self) -> List[Tuple[int, int, int, int]]:
        """(key, value, ts, seq) for every install; call at quiescence."""
        out = []
        with self._lock:
            buffers = list(self._buffers)
        for buf in buffers:
            for key, vnode in buf:
                out.append((key, vnode.value, vnode.ts, vnode.seq))
        return out

    def collect_ranges(self) -> List[Tuple[int, int, int, tuple]]:
        with self._lock:
            buffers = list(self._range_buffers)
        out = []
        for buf in buffers:
            out.extend(buf)
        return out


def snapshot_check(
    updates: List[Tuple[int, int, int, int]],
    ranges: List[Tuple[int, int, int, tuple]],
) -> List[str]:
    """Replay each range result against the update log at its timestamp.

    Returns human-readable violations; empty means every range query saw
    exactly the reconstructed snapshot.
    """
    from bisect import bisect_right

    per_key: Dict[int, List[Tuple[int, int, int]]] = {}
    for key, value, ts, seq in updates:
        per_key.setdefault(key, []).append((ts, seq, value))
    for entries in per_key.values():
        entries.sort()
    sorted_keys = sorted(per_key)

    violations = []
    for low, high, bound, result in ranges:
        expected = []
        for key in sorted_keys:
            if key < low or key > high:
                continue
            entries = per_key[key]
            idx = bisect_right(entries, (bound, float("inf"), 0))
            if idx == 0:
                continue
            value = entries[idx - 1][2]
            if value != TOMBSTONE:
                expected.append((key, value))
        if list(result) != expected:
            violations.append(
                f"range [{low}, {high}] at ts {bound}: got {list(result)[:8]}..., "
                f"expected {expected[:8]}... (lengths {len(result)} vs {len(expected)})"
            )
    return violations


# ---------------------------------------------------------------------------
# structural audits
# ---------------------------------------------------------------------------


def chain_scan(tree: VersionedBTree) -> List[str]:
    """Audit live version chains: no cycles, no node in two places."""
    violations = []
    seen_global = set()
    for leaf in tree.live_leaves():
        for node in leaf.list.iter_nodes():
            seen_chain = set()
            v = unmark(node.vhead)
            while v is not None:
                if id(v) in seen_chain:
                    violations.append(f"cycle in version chain of key {node.key}")
                    break
                seen_chain.add(id(v))
                if id(v) in seen_global:
                    violations.append(
                        f"version node shared between chains (key {node.key})"
                    )
                seen_global.add(id(v))
                v = v.nextv
    return violations


# ---------------------------------------------------------------------------
# stress driver
# ---------------------------------------------------------------------------


@dataclass
class StressConfig:
    threads: int = 4
    ops_per_thread: int = 2000
    keyspace: int = 512
    seed: int = 1
    read_pct: int = 40
    insert_pct: int = 30
    delete_pct: int = 20
    rq_pct: int = 10
    rq_size: int = 16
    tree_config: Optional[TreeConfig] = None
    wf_config: Optional[WaitFreeConfig] = None
    record_effects: bool = False
    # Iterations of each forced announced-update interleaving to run after
    # the randomized phase; 0 skips them.
    race_iterations: int = 0


@dataclass
class StressReport:
    ok: bool
    ops_done: int
    per_thread: List[int]
    structure_violations: List[str]
    chain_violations: List[str]
    snapshot_violations: List[str]
    race_violations: List[str]
    stats: dict
    duration_s: float


def stress(config: StressConfig) -> StressReport:
    """Randomized concurrent run followed by quiescent audits."""
    recorder = EffectRecorder() if config.record_effects else None
    store = WaitFreeStore(
        tree_config=config.tree_config,
        wf_config=config.wf_config,
        total_threads=config.threads + 2,
        recorder=recorder,
    )
    per_thread = [0] * config.threads
    errors: List[BaseException] = []
    start_barrier = threading.Barrier(config.threads)

    def worker(widx: int) -> None:
        rng = random.Random(config.seed * 1_000_003 + widx)
        handle = store.register_thread()
        start_barrier.wait()
        try:
            for _ in range(config.ops_per_thread):
                r = rng.randrange(100)
                key = rng.randrange(1, config.keyspace + 1)
                if r < config.read_pct:
                    store.search(key)
                elif r < config.read_pct + config.insert_pct:
                    store.insert(handle, key, rng.randrange(1, 1 << 32))
                elif r < config.read_pct + config.insert_pct + config.delete_pct:
                    store.delete(handle, key)
                else:
                    high = min(key + config.rq_size - 1, config.keyspace)
                    store.range_query(key, high)
                per_thread[widx] += 1
        except BaseException as exc:  # surfaced in the report
            errors.append(exc)

    threads = [
        threading.Thread(target=worker, args=(i,), name=f"stress-{i}")
        for i in range(config.threads)
    ]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    duration = time.perf_counter() - t0

    if errors:
        raise errors[0]

    structure = store.validate_structure()
    chains = chain_scan(store.tree)
    snapshot_violations: List[str] = []
    if recorder is not None:
        snapshot_violations = snapshot_check(
            recorder.collect_updates(), recorder.collect_ranges()
        )
    race_violations: List[str] = []
    if config.race_iterations > 0:
        for name, schedule in RACE_SCHEDULES.items():
            race_violations.extend(
                f"{name}: {v}" for v in schedule(config.race_iterations)
            )
    store.tree.reclaimer.flush()
    report = StressReport(
        ok=structure.ok
        and not chains
        and not snapshot_violations
        and not race_violations,
        ops_done=sum(per_thread),
        per_thread=per_thread,
        structure_violations=structure.violations,
        chain_violations=chains,
        snapshot_violations=snapshot_violations,
        race_violations=race_violations,
        stats=store.stats(),
        duration_s=duration,
    )
    return report


# ---------------------------------------------------------------------------
# recorded mixed histories (for the linearizability campaign)
# ---------------------------------------------------------------------------


def record_history(
    seed: int,
    n_threads: int = 3,
    ops_per_thread: int = 6,
    keyspace: int = 8,
    rq_width: int = 4,
) -> List[HistoryOp]:
    """Run a tiny concurrent episode on a real store and log it."""
    recorder = HistoryRecorder()
    store = WaitFreeStore(
        tree_config=TreeConfig(max_keys=4, min_keys=2, leaf_max=4, leaf_min=2),
        wf_config=WaitFreeConfig(fast_path_retries=1, helping_period=1),
        total_threads=n_threads,
    )
    barrier = threading.Barrier(n_threads)
    errors: List[BaseException] = []

    def worker(tid: int) -> None:
        rng = random.Random(seed * 7919 + tid)
        handle = store.register_thread()
        barrier.wait()
        try:
            for _ in range(ops_per_thread):
                r = rng.randrange(100)
                key = rng.randrange(1, keyspace + 1)
                if r < 30:
                    recorder.record(
                        tid, "search", (key,), lambda: store.search(key)
                    )
                elif r < 60:
                    value = rng.randrange(1, 100)
                    recorder.record(
                        tid,
                        "insert",
                        (key, value),
                        lambda: store.insert(handle, key, value),
                    )
                elif r < 85:
                    recorder.record(
                        tid, "delete", (key,), lambda: store.delete(handle, key)
                    )
                else:
                    low = key
                    high = min(low + rng.randrange(rq_width), keyspace)
                    recorder.record(
                        tid,
                        "range",
                        (low, high),
                        lambda: store.range_query(low, high),
                    )
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(n_threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return recorder.history()


def lincheck_campaign(
    n_histories: int,
    seed: int = 0,
    n_threads: int = 3,
    ops_per_thread: int = 6,
    keyspace: int = 8,
    rq_width: int = 4,
) -> List[Tuple[int, Verdict]]:
    """Record and check many small histories; returns failures only."""
    failures = []
    for i in range(n_histories):
        history = record_history(
            seed + i,
            n_threads=n_threads,
            ops_per_thread=ops_per_thread,
            keyspace=keyspace,
            rq_width=rq_width,
        )
        verdict = check_linearizable(history)
        if not verdict.ok:
            failures.append((seed + i, verdict))
    return failures


# ---------------------------------------------------------------------------
# forced interleavings for the announced-update races
# ---------------------------------------------------------------------------


def _fresh_list() -> Tuple[VersionedList, VersionTracker]:
    tracker = VersionTracker()
    return VersionedList(tracker), tracker


def _chain_values(node) -> List[int]:
    values = []
    v = unmark(node.vhead)
    while v is not None:
        values.append(v.value)
        v = v.nextv
    return values


def _count_occurrences(node, target) -> int:
    n = 0
    v = unmark(node.vhead)
    while v is not None:
        if v is target:
            n += 1
        v = v.nextv
    return n


def race_stale_head(iterations: int = 1000) -> List[str]:
    """Two helpers race to install the same announced update.

    One helper is paused just before the head swap until the other has
    fully completed; exactly one install may land and the chain must keep
    every intermediate version.
    """
    violations = []
    for i in range(iterations):
        lst, _ = _fresh_list()
        assert lst.insert(5, 10).kind is OpKind.NEW_KEY_INSERTED
        state = OperationState(1, 5, 77, VersionNode(77), is_delete=False)
        arr = [state]
        released = threading.Event()
        paused = threading.Event()

        def pause_cb():
            if threading.current_thread().name == "slow":
                paused.set()
                released.wait(5.0)

        hooks.install("wf_version_cas:before_vhead_cas", pause_cb)
        try:
            slow = threading.Thread(
                name="slow", target=lambda: lst.wf_insert(5, 77, arr, 0, 1)
            )
            slow.start()
            if not paused.wait(5.0):
                violations.append(f"iter {i}: slow helper never reached the swap")
                released.set()
                slow.join()
                continue
            fast_result = lst.wf_insert(5, 77, arr, 0, 1)
            released.set()
            slow.join()
        finally:
            hooks.remove("wf_version_cas:before_vhead_cas")
        node = lst.find_readonly(5)
        installs = _count_occurrences(node, state.vnode)
        if installs != 1:
            violations.append(f"iter {i}: shared node installed {installs} times")
        if not state.finished:
            violations.append(f"iter {i}: operation not marked finished")
        if fast_result.kind not in (OpKind.KEY_UPDATED, OpKind.OPERATION_FINISHED):
            violations.append(f"iter {i}: unexpected result {fast_result.kind}")
        if _chain_values(node) != [77, 10]:
            violations.append(f"iter {i}: chain {_chain_values(node)}")
    return violations


def race_double_install(iterations: int = 1000) -> List[str]:
    """A linker stalls after linking the announced node; a second helper
    must detect the link through the stamped timestamp and not install a
    second copy."""
    violations = []
    for i in range(iterations):
        lst, _ = _fresh_list()
        state = OperationState(1, 9, 42, VersionNode(42), is_delete=False)
        arr = [state]
        released = threading.Event()
        paused = threading.Event()

        def pause_cb():
            if threading.current_thread().name == "linker":
                paused.set()
                released.wait(5.0)

        hooks.install("wf_insert:after_link_cas", pause_cb)
        try:
            linker = threading.Thread(
                name="linker", target=lambda: lst.wf_insert(9, 42, arr, 0, 1)
            )
            linker.start()
            if not paused.wait(5.0):
                violations.append(f"iter {i}: linker never linked")
                released.set()
                linker.join()
                continue
            second = lst.wf_insert(9, 42, arr, 0, 1)
            released.set()
            linker.join()
        finally:
            hooks.remove("wf_insert:after_link_cas")
        node = lst.find_readonly(9)
        if node.key != 9:
            violations.append(f"iter {i}: key missing after race")
            continue
        installs = _count_occurrences(node, state.vnode)
        if installs != 1:
            violations.append(f"iter {i}: shared node installed {installs} times")
        if second.kind not in (OpKind.OPERATION_FINISHED, OpKind.KEY_UPDATED):
            violations.append(f"iter {i}: unexpected second result {second.kind}")
        if _chain_values(node) != [42]:
            violations.append(f"iter {i}: chain {_chain_values(node)}")
        if lst.size() != 1:
            violations.append(f"iter {i}: duplicate key nodes linked")
    return violations


def race_chain_splice(iterations: int = 1000) -> List[str]:
    """A stalled helper must not rewind the shared node's backlink.

    While the helper sleeps between reading the backlink and swapping, an
    unrelated update lands and a second helper completes the announced
    operation over it.  The stalled helper's backlink claim must fail, and
    the unrelated version must stay in the chain.
    """
    violations = []
    for i in range(iterations):
        lst, _ = _fresh_list()
        assert lst.insert(3, 10).kind is OpKind.NEW_KEY_INSERTED
        state = OperationState(1, 3, 77, VersionNode(77), is_delete=False)
        arr = [state]
        released = threading.Event()
        paused = threading.Event()

        def pause_cb():
            if threading.current_thread().name == "stalled":
                paused.set()
                released.wait(5.0)

        hooks.install("wf_version_cas:before_nextv_cas", pause_cb)
        try:
            stalled = threading.Thread(
                name="stalled", target=lambda: lst.wf_insert(3, 77, arr, 0, 1)
            )
            stalled.start()
            if not paused.wait(5.0):
                violations.append(f"iter {i}: helper never reached the backlink swap")
                released.set()
                stalled.join()
                continue
            # Unrelated fast-path update slides in underneath.
            assert lst.insert(3, 20).kind is OpKind.KEY_UPDATED
            # A second helper completes the announced operation on top.
            lst.wf_insert(3, 77, arr, 0, 1)
            released.set()
            stalled.join()
        finally:
            hooks.remove("wf_version_cas:before_nextv_cas")
        node = lst.find_readonly(3)
        installs = _count_occurrences(node, state.vnode)
        if installs != 1:
            violations.append(f"iter {i}: shared node installed {installs} times")
        values = _chain_values(node)
        if values != [77, 20, 10]:
            violations.append(f"iter {i}: intermediate version lost: {values}")
    return violations


RACE_SCHEDULES = {
    "stale_head": race_stale_head,
    "double_install": race_double_install,
    "chain_splice": race_chain_splice,
}
