import gc
import threading
import weakref

import pytest

from vbtree.reclamation import EpochReclaimer


class Node:
    pass


class TestGuards:
    def test_nested_pin_unpin(self):
        r = EpochReclaimer()
        with r.guard():
            with r.guard():
                assert r._slot().depth == 2
            assert r._slot().depth == 1
        assert r._slot().depth == 0

    def test_pin_blocks_epoch_advance(self):
        r = EpochReclaimer()
        release = threading.Event()
        pinned = threading.Event()

        def holder():
            with r.guard():
                pinned.set()
                release.wait(5)

        t = threading.Thread(target=holder)
        t.start()
        pinned.wait(5)
        e0 = r.current_epoch()
        assert r.try_advance()  # first advance fine: pin is at e0
        assert not r.try_advance()  # pinned slot now lags
        assert r.current_epoch() == e0 + 1
        release.set()
        t.join()
        assert r.try_advance()


class TestRetire:
    def test_free_deferred_while_pinned(self):
        r = EpochReclaimer()
        obj = Node()
        ref = weakref.ref(obj)
        holder_release = threading.Event()
        holder_pinned = threading.Event()

        def holder():
            with r.guard():
                holder_pinned.set()
                holder_release.wait(5)

        t = threading.Thread(target=holder)
        t.start()
        holder_pinned.wait(5)

        r.retire(obj)
        del obj
        for _ in range(6):
            r.try_advance()
            r.collect()
        gc.collect()
        assert ref() is not None, "retired object released under an active guard"
        assert r.pending_count() == 1

        holder_release.set()
        t.join()
        r.flush()
        gc.collect()
        assert ref() is None
        assert r.pending_count() == 0

    def test_free_proceeds_after_unpin(self):
        r = EpochReclaimer()
        refs = []
        for _ in range(10):
            obj = Node()
            refs.append(weakref.ref(obj))
            with r.guard():
                r.retire(obj)
            del obj
        r.flush()
        gc.collect()
        assert all(ref() is None for ref in refs)
        stats = r.stats()
        assert stats["retired"] == 10
        assert stats["released"] == 10
        assert stats["pending"] == 0

    def test_double_retire_rejected(self):
        r = EpochReclaimer()
        obj = Node()
        r.retire(obj)
        with pytest.raises(ValueError):
            r.retire(obj)

    def test_retire_after_release_is_new_cycle(self):
        r = EpochReclaimer()
        obj = Node()
        r.retire(obj)
        r.flush()
        assert r.pending_count() == 0
        # Not pending anymore: retiring a new object reusing nothing works.
        r.retire(Node())
        assert r.pending_count() == 1


class TestBoundedGarbage:
    def test_steady_state_pending_bounded(self):
        r = EpochReclaimer()
        for _ in range(2000):
            with r.guard():
                r.retire(Node())
        # Collection batches keep the backlog near the batch size.
        assert r.pending_count() <= 4 * r.BATCH
        r.flush()
        assert r.pending_count() == 0

    def test_concurrent_retire_and_guards(self):
        r = EpochReclaimer()
        errors = []

        def worker():
            try:
                for _ in range(500):
                    with r.guard():
                        r.retire(Node())
            except BaseException as exc:
                errors.append(exc)

        threads = [threading.Thread(target=worker) for _ in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        r.flush()
        stats = r.stats()
        assert stats["retired"] == 3000
        assert stats["released"] == 3000
