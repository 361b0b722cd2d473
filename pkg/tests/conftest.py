import numpy as np
import pytest

from jctnet.config import RunConfig
from jctnet.tensor import Tensor


@pytest.fixture
def toy_cfg():
    return RunConfig.toy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(a, requires_grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)
