import numpy as np
import pytest

from tensorlake import ChunkPolicy, MemoryProvider, create_dataset


@pytest.fixture
def mem():
    return MemoryProvider()


@pytest.fixture
def small_policy():
    # desk-scale bounds so tests produce many chunks quickly
    return ChunkPolicy(min_bytes=2048, max_bytes=4096)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scalar_ds(mem, small_policy):
    """int64 scalar tensor 'x', handy for version-control tests."""
    return create_dataset(
        mem,
        {"x": {"htype": "generic", "dtype": "int64", "ndim": 0}},
        policy=small_policy,
    )


def make_ragged(rng, n, max_side=16, dtype=np.float32):
    out = []
    for _ in range(n):
        h = int(rng.integers(1, max_side + 1))
        w = int(rng.integers(1, max_side + 1))
        out.append(rng.standard_normal((h, w)).astype(dtype))
    return out
