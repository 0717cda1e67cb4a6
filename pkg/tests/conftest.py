import os
import sys

import numpy as np
import pytest

from cmfdsim import kernels

sys.path.insert(0, os.path.dirname(__file__))

BACKENDS = [b for b in kernels.backends()]


@pytest.fixture(params=BACKENDS, ids=lambda b: b.BACKEND)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
