import numpy as np
import pytest

from ata import evaluation


@pytest.fixture(scope="session")
def small_bench():
    """Low-dimensional benchmark draw shared by the slower integration tests."""
    return evaluation.make_benchmark(
        seed=7, n_id=400, n_think=200, n_ood=400, dim=32, text_dim=24
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
