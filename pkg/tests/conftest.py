import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def unit_rows(rng, b, d):
    x = rng.standard_normal((b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
