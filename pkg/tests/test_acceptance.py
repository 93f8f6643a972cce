"""Acceptance gate: one test per criterion, run at the stated scale.

Each criterion prints a single PASS line on the real stdout (bypassing
capture) so a `pytest -v` run shows both the verbose test status and the
criterion ledger.
"""

import gc
import os
import random
import sys
import threading
import time
import weakref

import pytest

from vbtree import hooks
from vbtree.core import OpKind, TOMBSTONE
from vbtree.tree import TreeConfig, VersionedBTree
from vbtree.verify import (
    EffectRecorder,
    SequentialOracle,
    StressConfig,
    chain_scan,
    lincheck_campaign,
    race_chain_splice,
    race_double_install,
    race_stale_head,
    snapshot_check,
    stress,
)
from vbtree.waitfree import WaitFreeConfig, WaitFreeStore


def _announce(num: int, name: str, detail: str = "") -> None:
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {num} {name}: PASS{suffix}", flush=True)


class TestCriterion1OracleEquivalence:
    def test_criterion_1_oracle_equivalence(self):
        """10^5 single-threaded mixed ops match the sequential oracle."""
        t0 = time.perf_counter()
        store = WaitFreeStore(total_threads=2)
        handle = store.register_thread()
        oracle = SequentialOracle()
        rng = random.Random(20240817)
        keyspace = 1000
        n_ops = 100_000
        for i in range(n_ops):
            r = rng.randrange(100)
            key = rng.randrange(1, keyspace + 1)
            if r < 40:
                got = store.search(key)
                want = oracle.search(key)
                assert got == want, (i, "search", key, got, want)
            elif r < 65:
                value = rng.randrange(1, 1 << 30)
                got = store.insert(handle, key, value)
                want = oracle.insert(key, value)
                assert got.kind is want.kind, (i, "insert", key, got, want)
            elif r < 90:
                got = store.delete(handle, key)
                want = oracle.delete(key)
                assert got.kind is want.kind, (i, "delete", key, got, want)
            else:
                high = min(key + rng.randrange(1, 20), keyspace)
                got = store.range_query(key, high)
                want = oracle.range_query(key, high)
                assert got == want, (i, "range", key, high)
        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0, f"oracle equivalence run took {elapsed:.1f}s (budget 30s)"
        report = store.validate_structure()
        assert report.ok, report.violations
        _announce(1, "oracle equivalence", f"{n_ops} ops in {elapsed:.1f}s")


class TestCriterion2Linearizability:
    def test_criterion_2_linearizability_campaign(self):
        """1000 recorded histories (3 threads x 6 ops, keyspace 8) all pass."""
        t0 = time.perf_counter()
        failures = lincheck_campaign(
            1000, seed=7_000_000, n_threads=3, ops_per_thread=6,
            keyspace=8, rq_width=4,
        )
        elapsed = time.perf_counter() - t0
        assert failures == [], failures[:3]
        assert elapsed < 600.0, f"campaign took {elapsed:.0f}s (budget 600s)"
        _announce(2, "linearizability campaign", f"1000 histories in {elapsed:.0f}s")


class TestCriterion3SnapshotConsistency:
    def test_criterion_3_snapshot_consistency(self):
        """8-thread 30s run with 10% range queries; zero snapshot violations."""
        recorder = EffectRecorder()
        store = WaitFreeStore(
            tree_config=TreeConfig(max_keys=8, min_keys=2, leaf_max=8, leaf_min=2),
            total_threads=10,
            recorder=recorder,
        )
        keyspace = 512
        stop = threading.Event()
        errors = []
        barrier = threading.Barrier(9)

        def worker(widx):
            rng = random.Random(9_000 + widx)
            handle = store.register_thread()
            barrier.wait()
            try:
                while not stop.is_set():
                    r = rng.randrange(100)
                    key = rng.randrange(1, keyspace + 1)
                    if r < 40:
                        store.search(key)
                    elif r < 65:
                        store.insert(handle, key, rng.randrange(1, 1 << 30))
                    elif r < 90:
                        store.delete(handle, key)
                    else:
                        store.range_query(key, min(key + 16, keyspace))
            except BaseException as exc:
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        barrier.wait()
        time.sleep(30.0)
        stop.set()
        for t in threads:
            t.join()
        assert not errors, errors[:1]
        updates = recorder.collect_updates()
        ranges = recorder.collect_ranges()
        assert ranges, "run produced no range queries"
        violations = snapshot_check(updates, ranges)
        assert violations == [], violations[:5]
        _announce(
            3, "snapshot consistency",
            f"{len(ranges)} range queries, {len(updates)} updates, 0 violations",
        )


class TestCriterion4StructuralInvariants:
    def test_criterion_4_structural_invariants(self):
        """8-thread 10^5-op churn at leaf_max=8, 20 seeds, zero violations."""
        total_checked = 0
        for seed in range(20):
            report = stress(
                StressConfig(
                    threads=8,
                    ops_per_thread=12_500,
                    keyspace=700,
                    seed=seed,
                    read_pct=20,
                    insert_pct=40,
                    delete_pct=35,
                    rq_pct=5,
                    rq_size=16,
                    tree_config=TreeConfig(
                        max_keys=8, min_keys=2, leaf_max=8, leaf_min=2
                    ),
                )
            )
            assert report.ok, (
                seed,
                report.structure_violations[:3],
                report.chain_violations[:3],
            )
            total_checked += report.ops_done
        _announce(4, "structural invariants", f"20 seeds, {total_checked} ops")


class TestCriterion5HelpingLiveness:
    def test_criterion_5_helping_liveness(self):
        """A suspended announcer's operation completes via helpers, within
        one helping period per registered thread, 100/100 trials."""
        s_period = 3
        trials = 100
        for trial in range(trials):
            store = WaitFreeStore(
                tree_config=TreeConfig(max_keys=8, min_keys=2, leaf_max=8, leaf_min=2),
                wf_config=WaitFreeConfig(fast_path_retries=1, helping_period=s_period),
                total_threads=3,
            )
            announcer_handle = store.register_thread()  # tid 0
            announced = threading.Event()
            release = threading.Event()

            def on_announce():
                announced.set()
                release.wait(10)

            def force_slow():
                return threading.current_thread().name == "announcer" or None

            hooks.install("waitfree:announced", on_announce)
            hooks.install("waitfree:fast_attempt_override", force_slow)

            results = []
            announcer = threading.Thread(
                name="announcer",
                target=lambda: results.append(
                    store.insert(announcer_handle, 42, trial + 1)
                ),
            )
            announcer.start()
            assert announced.wait(5), f"trial {trial}: announcement never appeared"

            state = store.state_array[announcer_handle.tid]
            assert state is not None and not state.finished

            helper = store.register_thread()
            bound = s_period * store.total_threads
            ops_by_helper = 0
            while not state.finished and ops_by_helper < bound:
                store.insert(helper, 1000 + ops_by_helper, 1)
                ops_by_helper += 1
            assert state.finished, (
                f"trial {trial}: not helped within {bound} helper ops"
            )

            release.set()
            announcer.join()
            hooks.clear()
            assert results[0].kind in (
                OpKind.OPERATION_FINISHED,
                OpKind.NEW_KEY_INSERTED,
            )
            assert store.search(42).value == trial + 1
        _announce(5, "helping liveness", f"{trials}/{trials} trials")


class TestCriterion6RaceRegressions:
    def test_criterion_6_race_regressions(self):
        """The three forced announced-update schedules, 10^3 iterations each."""
        for name, schedule in (
            ("stale head", race_stale_head),
            ("double install", race_double_install),
            ("chain splice", race_chain_splice),
        ):
            violations = schedule(1000)
            assert violations == [], (name, violations[:3])
        _announce(6, "race regressions", "3 schedules x 1000 iterations")


class TestCriterion7PruningBound:
    def test_criterion_7_pruning_bound(self):
        """Version count stays under 10x live keys across rebuild waves and
        reclamation counters (plus a leak probe) confirm release."""
        from vbtree.versioned_list import VersionNode

        store = WaitFreeStore(
            tree_config=TreeConfig(max_keys=8, min_keys=2, leaf_max=8, leaf_min=2),
            total_threads=4,
        )
        keyspace = 1000
        probes = []
        waves = 8
        ops_per_wave = 6000
        for wave in range(waves):
            errors = []

            def worker(widx):
                rng = random.Random(wave * 100 + widx)
                handle = store.register_thread()
                try:
                    for i in range(ops_per_wave // 2):
                        key = rng.randrange(1, keyspace + 1)
                        if rng.random() < 0.55:
                            store.insert(handle, key, i)
                        else:
                            store.delete(handle, key)
                        if i % 500 == 0:
                            # Range queries start and finish, letting the
                            # reclamation bound advance.
                            store.range_query(key, min(key + 8, keyspace))
                except BaseException as exc:
                    errors.append(exc)
                finally:
                    store.deregister_thread(handle)

            threads = [threading.Thread(target=worker, args=(i,)) for i in range(2)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert not errors, errors[:1]

            live = len(store.tree.live_items())
            versions = store.tree.count_version_nodes()
            probes.append((wave, live, versions))
            assert versions < 10 * max(live, 1), (
                f"wave {wave}: {versions} versions for {live} live keys"
            )

        splits_plus_merges = (
            store.tree.stats.leaf_splits.get() + store.tree.stats.merges.get()
        )
        assert splits_plus_merges > 0, "churn produced no rebuild waves"

        stats = store.tree.reclaimer.stats()
        assert stats["retired"] > 0
        store.tree.reclaimer.flush()
        stats = store.tree.reclaimer.stats()
        assert stats["released"] > 0
        assert stats["pending"] == 0

        # Leak probe: with the store dropped, every version node must be
        # collectable (no stray registries keep the structure alive).
        leaf = store.tree.live_leaves()[0]
        node = next(iter(leaf.list.iter_nodes()), None)
        refs = []
        if node is not None:
            v = node.vhead
            from vbtree.core import unmark

            refs.append(weakref.ref(unmark(v)))
        del leaf, node, v, store
        gc.collect()
        assert all(r() is None for r in refs), "version nodes leaked after teardown"
        worst = max(versions / max(live, 1) for _, live, versions in probes)
        _announce(7, "pruning bound", f"worst ratio {worst:.2f}x across {waves} waves")


class TestCriterion8ScalingSmoke:
    def _run(self, n_threads: int, duration: float = 2.5):
        from vbtree.bench_cli import WorkloadConfig, run_bench

        return run_bench(
            WorkloadConfig(
                read_pct=95,
                insert_pct=3,
                delete_pct=2,
                rq_pct=0,
                prefill=2000,
                keyspace=10_000,
                threads=n_threads,
                duration_s=duration,
                seed=99,
            )
        )

    def test_criterion_8_no_starvation(self):
        metrics = self._run(8)
        per_thread = metrics["per_thread_ops"]
        mean = sum(per_thread) / len(per_thread)
        assert all(ops >= 0.1 * mean for ops in per_thread), per_thread
        _announce(
            8, "no thread starves",
            f"per-thread min {min(per_thread)} vs mean {mean:.0f}",
        )

    def test_criterion_8_scaling_ratio(self):
        one = self._run(1)
        eight = self._run(8)
        ratio = eight["throughput_ops_per_s"] / max(one["throughput_ops_per_s"], 1)
        detail = (
            f"1T {one['throughput_ops_per_s']:.0f} ops/s, "
            f"8T {eight['throughput_ops_per_s']:.0f} ops/s, ratio {ratio:.2f}x"
        )
        gil_enabled = getattr(sys, "_is_gil_enabled", lambda: True)()
        cores = os.cpu_count() or 1
        if gil_enabled or cores < 8:
            print(
                f"ACCEPTANCE 8 scaling ratio: SOFT-SKIP ({detail}; "
                f"GIL={gil_enabled}, cores={cores})",
                flush=True,
            )
            pytest.xfail(
                f"3x scaling needs >= 8 cores and a free-threaded build; "
                f"this host: {cores} cores, GIL={gil_enabled}; measured {detail}"
            )
        assert ratio >= 3.0, detail
        _announce(8, "scaling ratio", detail)


class TestCriterion9SearchNoRestart:
    def test_criterion_9_search_no_restart(self):
        """Search performs exactly one descent: restart counter is zero
        across a fresh read-heavy stress run."""
        report = stress(
            StressConfig(
                threads=6,
                ops_per_thread=5000,
                keyspace=400,
                seed=77,
                read_pct=60,
                insert_pct=20,
                delete_pct=15,
                rq_pct=5,
                tree_config=TreeConfig(max_keys=8, min_keys=2, leaf_max=8, leaf_min=2),
            )
        )
        assert report.ok
        assert report.stats["search_restarts"] == 0
        assert report.stats["searches"] > 0
        _announce(9, "search no-restart", f"{report.stats['searches']} searches")
