import numpy as np
import pytest

from nnxtract.model import VictimModel
from nnxtract.oracle import Oracle


def random_victim(dims, seed, bias_scale=0.1):
    """Plain random-init victim with small random biases."""
    rng = np.random.default_rng(seed)
    Ws = [rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i])
          for i in range(len(dims) - 1)]
    bs = [rng.standard_normal(dims[i + 1]) * bias_scale
          for i in range(len(dims) - 1)]
    return VictimModel.from_arrays(Ws, bs)


@pytest.fixture
def victim_10551():
    return random_victim((10, 5, 5, 1), seed=7)


@pytest.fixture
def oracle_10551(victim_10551):
    return Oracle(victim_10551)


@pytest.fixture
def tiny_victim():
    # 2-2-1 with hand-picked weights used by several worked examples
    return VictimModel.from_arrays(
        [np.array([[1.0, -1.0], [1.0, 1.0]]), np.array([[1.0, 2.0]])],
        [np.zeros(2), np.array([0.5])],
    )
