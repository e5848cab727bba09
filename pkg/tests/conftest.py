import numpy as np
import pytest

from qatie.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, shape, lo=-1.0, hi=1.0, dtype=np.float32, requires_grad=False):
    return Tensor(rng.uniform(lo, hi, size=shape).astype(dtype), requires_grad=requires_grad)


@pytest.fixture
def rand():
    return rand_tensor
