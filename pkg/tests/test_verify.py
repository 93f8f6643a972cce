import random
import threading

import pytest

from vbtree.core import OpKind, TOMBSTONE
from vbtree.tree import TreeConfig
from vbtree.verify import (
    BoundsExceeded,
    EffectRecorder,
    HistoryOp,
    HistoryRecorder,
    SequentialOracle,
    StressConfig,
    check_linearizable,
    chain_scan,
    lincheck_campaign,
    race_chain_splice,
    race_double_install,
    race_stale_head,
    record_history,
    snapshot_check,
    stress,
)
from vbtree.waitfree import WaitFreeConfig, WaitFreeStore


def op(op_id, tid, kind, args, result, inv, res):
    return HistoryOp(op_id, tid, kind, args, result, inv, res)


class TestOracle:
    def test_insert_then_search(self):
        oracle = SequentialOracle()
        assert oracle.insert(1, 10).kind is OpKind.NEW_KEY_INSERTED
        assert oracle.insert(1, 20).kind is OpKind.KEY_UPDATED
        assert oracle.search(1).value == 20
        assert oracle.delete(1).kind is OpKind.KEY_UPDATED
        assert oracle.delete(1).kind is OpKind.KEY_NOT_PRESENT
        assert oracle.search(1).kind is OpKind.KEY_NOT_PRESENT

    def test_range(self):
        oracle = SequentialOracle()
        for k in (5, 1, 3):
            oracle.insert(k, k)
        assert oracle.range_query(1, 4) == [(1, 1), (3, 3)]


class TestChecker:
    def test_single_thread_history_linearizable(self):
        history = [
            op(1, 0, "insert", (1, 10), "NEW_KEY_INSERTED", 1, 2),
            op(2, 0, "search", (1,), ("found", 10), 3, 4),
            op(3, 0, "delete", (1,), "KEY_UPDATED", 5, 6),
            op(4, 0, "search", (1,), ("absent",), 7, 8),
        ]
        verdict = check_linearizable(history)
        assert verdict.ok
        assert verdict.witness == [1, 2, 3, 4]

    def test_phantom_read_rejected(self):
        # A search returns a value never inserted.
        history = [
            op(1, 0, "insert", (1, 10), "NEW_KEY_INSERTED", 1, 2),
            op(2, 1, "search", (1,), ("found", 99), 3, 4),
        ]
        verdict = check_linearizable(history)
        assert not verdict.ok
        assert verdict.violating_prefix is not None

    def test_concurrent_overlap_allows_either_order(self):
        # insert and search overlap: both found/absent are linearizable.
        for result in (("found", 10), ("absent",)):
            history = [
                op(1, 0, "insert", (1, 10), "NEW_KEY_INSERTED", 1, 4),
                op(2, 1, "search", (1,), result, 2, 3),
            ]
            assert check_linearizable(history).ok, result

    def test_real_time_order_enforced(self):
        # Search strictly after the insert responded must see the value.
        history = [
            op(1, 0, "insert", (1, 10), "NEW_KEY_INSERTED", 1, 2),
            op(2, 1, "search", (1,), ("absent",), 3, 4),
        ]
        assert not check_linearizable(history).ok

    def test_opaque_results_match_either_outcome(self):
        history = [
            op(1, 0, "insert", (1, 10), "OPERATION_FINISHED", 1, 2),
            op(2, 1, "delete", (1,), "OPERATION_FINISHED", 3, 4),
            op(3, 0, "search", (1,), ("absent",), 5, 6),
        ]
        assert check_linearizable(history).ok

    def test_range_result_checked(self):
        history = [
            op(1, 0, "insert", (1, 10), "NEW_KEY_INSERTED", 1, 2),
            op(2, 0, "insert", (2, 20), "NEW_KEY_INSERTED", 3, 4),
            op(3, 1, "range", (1, 4), ((1, 10), (2, 20)), 5, 6),
        ]
        assert check_linearizable(history).ok
        bad = history[:2] + [op(3, 1, "range", (1, 4), ((1, 10),), 5, 6)]
        assert not check_linearizable(bad).ok

    def test_minimal_violating_prefix_is_short(self):
        history = [
            op(1, 0, "insert", (1, 10), "NEW_KEY_INSERTED", 1, 2),
            op(2, 1, "search", (1,), ("found", 99), 3, 4),
            op(3, 0, "insert", (2, 20), "NEW_KEY_INSERTED", 5, 6),
            op(4, 1, "search", (2,), ("found", 20), 7, 8),
        ]
        verdict = check_linearizable(history)
        assert not verdict.ok
        assert {o.op_id for o in verdict.violating_prefix} == {1, 2}

    def test_bounds_enforced(self):
        big = [
            op(i, i % 3, "insert", (1, 1), "OPERATION_FINISHED", 2 * i, 2 * i + 1)
            for i in range(1, 26)
        ]
        with pytest.raises(BoundsExceeded):
            check_linearizable(big)
        many_threads = [
            op(i, i, "insert", (1, 1), "OPERATION_FINISHED", 2 * i, 2 * i + 1)
            for i in range(5)
        ]
        with pytest.raises(BoundsExceeded):
            check_linearizable(many_threads)

    def test_self_test_against_locked_map(self):
        """Histories from a lock-serialized map are always linearizable."""
        for seed in range(40):
            history = self._locked_map_history(seed)
            assert check_linearizable(history).ok, seed

    def test_tampered_results_flagged(self):
        flagged = 0
        for seed in range(40):
            history = self._locked_map_history(seed)
            tampered = self._tamper(history, seed)
            if tampered is None:
                continue
            if not check_linearizable(tampered).ok:
                flagged += 1
        assert flagged >= 10  # most result corruptions are caught

    @staticmethod
    def _locked_map_history(seed):
        recorder = HistoryRecorder()
        lock = threading.Lock()
        model = {}

        def run_op(tid, rng):
            kind = rng.choice(["insert", "delete", "search"])
            key = rng.randrange(1, 5)
            if kind == "insert":
                value = rng.randrange(1, 50)

                def go():
                    with lock:
                        present = key in model
                        model[key] = value
                        from vbtree.core import OpResult

                        return OpResult(
                            OpKind.KEY_UPDATED if present else OpKind.NEW_KEY_INSERTED
                        )

                recorder.record(tid, "insert", (key, value), go)
            elif kind == "delete":

                def go():
                    with lock:
                        from vbtree.core import OpResult

                        if key in model:
                            del model[key]
                            return OpResult(OpKind.KEY_UPDATED)
                        return OpResult(OpKind.KEY_NOT_PRESENT)

                recorder.record(tid, "delete", (key,), go)
            else:

                def go():
                    with lock:
                        from vbtree.core import OpResult

                        if key in model:
                            return OpResult(OpKind.OPERATION_FINISHED, model[key])
                        return OpResult(OpKind.KEY_NOT_PRESENT)

                recorder.record(tid, "search", (key,), go)

        def worker(tid):
            rng = random.Random(seed * 31 + tid)
            for _ in range(5):
                run_op(tid, rng)

        threads = [threading.Thread(target=worker, args=(t,)) for t in range(3)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return recorder.history()

    @staticmethod
    def _tamper(history, seed):
        rng = random.Random(seed)
        searches = [i for i, o in enumerate(history) if o.op == "search"]
        if not searches:
            return None
        idx = rng.choice(searches)
        out = list(history)
        out[idx] = out[idx]._replace(result=("found", 999))
        return out


class TestSnapshotCheck:
    def test_no_updates_trivially_consistent(self):
        assert snapshot_check([], [(1, 10, 5, ())]) == []

    def test_updates_straddling_bound(self):
        updates = [(4, 40, 2, 1), (4, 99, 8, 2)]
        ranges = [(1, 10, 5, ((4, 40),)), (1, 10, 9, ((4, 99),))]
        assert snapshot_check(updates, ranges) == []

    def test_delete_at_or_before_bound_excluded(self):
        updates = [(4, 40, 2, 1), (4, TOMBSTONE, 5, 2)]
        assert snapshot_check(updates, [(1, 10, 5, ())]) == []
        assert snapshot_check(updates, [(1, 10, 4, ((4, 40),))]) == []

    def test_stamp_ties_broken_by_install_order(self):
        updates = [(4, 40, 3, 1), (4, 50, 3, 2)]
        assert snapshot_check(updates, [(1, 10, 3, ((4, 50),))]) == []
        assert snapshot_check(updates, [(1, 10, 3, ((4, 40),))]) != []

    def test_violation_reported(self):
        updates = [(4, 40, 2, 1)]
        violations = snapshot_check(updates, [(1, 10, 5, ((4, 41),))])
        assert len(violations) == 1


class TestEffectRecorderIntegration:
    def test_recorded_run_replays_clean(self):
        recorder = EffectRecorder()
        store = WaitFreeStore(
            tree_config=TreeConfig(max_keys=4, min_keys=2, leaf_max=4, leaf_min=2),
            total_threads=6,
            recorder=recorder,
        )
        n_threads = 4
        barrier = threading.Barrier(n_threads)

        def worker(widx):
            rng = random.Random(widx + 1)
            h = store.register_thread()
            barrier.wait()
            for i in range(250):
                key = rng.randrange(1, 40)
                r = rng.random()
                if r < 0.45:
                    store.insert(h, key, i * 10 + widx)
                elif r < 0.7:
                    store.delete(h, key)
                else:
                    store.range_query(key, min(key + 8, 40))

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(n_threads)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        updates = recorder.collect_updates()
        ranges = recorder.collect_ranges()
        assert ranges, "no range queries recorded"
        assert all(ts != -1 for _, _, ts, _ in updates)
        violations = snapshot_check(updates, ranges)
        assert violations == [], violations[:3]


class TestStress:
    def test_smoke_run(self):
        report = stress(
            StressConfig(
                threads=2,
                ops_per_thread=1000,
                keyspace=128,
                seed=3,
                tree_config=TreeConfig(max_keys=4, min_keys=2, leaf_max=4, leaf_min=2),
                record_effects=True,
            )
        )
        assert report.ok, (
            report.structure_violations,
            report.chain_violations,
            report.snapshot_violations,
        )
        assert report.ops_done == 2000

    def test_chain_scan_flags_cycle(self):
        from vbtree.tree import VersionedBTree

        tree = VersionedBTree(config=TreeConfig(max_keys=4, min_keys=2, leaf_max=4, leaf_min=2))
        tree.insert(1, 10)
        tree.insert(1, 20)
        leaf = tree.live_leaves()[0]
        node = leaf.list.find_readonly(1)
        from vbtree.core import unmark

        head = unmark(node.vhead)
        head.nextv.nextv = head  # corrupt: cycle
        assert chain_scan(tree)


class TestRaces:
    def test_stale_head_schedule(self):
        assert race_stale_head(50) == []

    def test_double_install_schedule(self):
        assert race_double_install(50) == []

    def test_chain_splice_schedule(self):
        assert race_chain_splice(50) == []


class TestRecordedHistories:
    def test_record_history_shape(self):
        history = record_history(1)
        assert len(history) == 18
        for o in history:
            assert o.inv < o.res

    def test_small_campaign_passes(self):
        failures = lincheck_campaign(25, seed=100)
        assert failures == [], failures[:2]
