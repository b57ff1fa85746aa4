import numpy as np
import pytest

import tminfer as tm


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run full-scale jobs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="full-scale job; pass --runslow to include")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def dims4():
    return tm.Dimensions(w=4)


@pytest.fixture(scope="session")
def channel4(dims4):
    """Well-conditioned w=4 ground truth used across tests."""
    return tm.build_random_tm(dims4, 0.25, seed=7)


@pytest.fixture(scope="session")
def data4_noisy(channel4):
    return tm.generate_dataset(channel4, 500, tm.NoiseSpec(sigma=0.1), seed=11)


@pytest.fixture(scope="session")
def data4_clean(channel4):
    return tm.generate_dataset(channel4, 500, tm.NoiseSpec(sigma=0.0), seed=11)


@pytest.fixture(scope="session")
def tight_opts():
    return tm.OptimOptions(grad_tol=1e-9, max_iters=400)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
