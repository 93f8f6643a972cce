"""Injectable pause points for deterministic concurrency tests.

Production code calls :func:`fire` at a handful of named points; with no
callback installed this is a dictionary miss and nothing else.  Tests install
callbacks (typically blocking on events) to force specific interleavings.

A callback may return a value; the few call sites that honour one document
what it means (e.g. the fast-path override in the wait-free driver).
"""

from __future__ import annotations

import threading
from typing import Any, Callable, Dict

_registry: Dict[str, Callable[[], Any]] = {}
_lock = threading.Lock()


def fire(name: str) -> Any:
    cb = _registry.get(name)
    if cb is None:
        return None
    return cb()


def install(name: str, callback: Callable[[], Any]) -> None:
    with _lock:
        _registry[name] = callback


def remove(name: str) -> None:
    with _lock:
        _registry.pop(name, None)


def clear() -> None:
    with _lock:
        _registry.clear()


def installed() -> list[str]:
    return sorted(_registry)
