import sys

import pytest

from vbtree import hooks

# Fine-grained thread switching so concurrency tests actually interleave.
sys.setswitchinterval(5e-5)


@pytest.fixture(autouse=True)
def clean_hooks():
    hooks.clear()
    yield
    hooks.clear()
