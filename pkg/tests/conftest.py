import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def ar1():
    from arma_bayes.model import ARMAModel

    return ARMAModel(1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


def central_diff(fn, theta, step=1e-5):
    """Plain central differences of a vector/array valued function (test oracle)."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = step
        cols.append((np.asarray(fn(theta + e)) - np.asarray(fn(theta - e))) / (2 * step))
    return np.stack(cols, axis=-1)
