import numpy as np
import pytest

from instasim.bundle import make_bundle


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def cls_bundle(rng):
    """Eight random unit CLS vectors, dim 16."""
    items = {}
    for i in range(8):
        v = rng.normal(size=16)
        items[f"img{i}"] = v / np.linalg.norm(v)
    return make_bundle("CLS", 16, items)


@pytest.fixture
def patch_bundle(rng):
    """Variable-row patch matrices, dim 16."""
    items = {}
    for i in range(8):
        rows = int(rng.integers(2, 7))
        items[f"img{i}"] = rng.normal(size=(rows, 16))
    return make_bundle("PATCH", 16, items)
