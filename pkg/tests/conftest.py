import numpy as np
import pytest

from chartrans import tensor as T


@pytest.fixture
def double():
    with T.precision("double"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize(params, seed, scale=0.3):
    """Replace every parameter with random values so zero-initialised biases get exercised."""
    r = np.random.default_rng(seed)
    for p in params.values():
        p.data = r.uniform(-scale, scale, size=p.shape).astype(p.data.dtype) + (
            1.0 if p.name and p.name.endswith(".g") else 0.0)
    return params
