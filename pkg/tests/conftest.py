import numpy as np
import pytest

from fedlora.aggregation import ClientUpdate
from fedlora.lora import LoraAdapter


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_adapter(rng, m, n, r, scaling=1.0):
    return LoraAdapter(rng.normal(size=(m, r)), rng.normal(size=(r, n)), scaling)


def random_updates(rng, k, m, n, r, weights=None):
    weights = weights if weights is not None else [1.0] * k
    return [ClientUpdate(random_adapter(rng, m, n, r), w) for w in weights]


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out
