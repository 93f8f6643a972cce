"""Concurrent ordered key-value store with wait-free updates and
linearizable snapshot range queries."""

from .core import (
    KEY_NEG_INF,
    KEY_POS_INF,
    TOMBSTONE,
    TS_UNSET,
    OpKind,
    OpResult,
)
from .tree import TreeConfig, VersionedBTree
from .waitfree import ThreadHandle, WaitFreeConfig, WaitFreeStore

__all__ = [
    "KEY_NEG_INF",
    "KEY_POS_INF",
    "TOMBSTONE",
    "TS_UNSET",
    "OpKind",
    "OpResult",
    "TreeConfig",
    "VersionedBTree",
    "WaitFreeConfig",
    "WaitFreeStore",
    "ThreadHandle",
]
