import numpy as np
import pytest

import caae.tensor as T


@pytest.fixture
def f64():
    with T.using_dtype(np.float64):
        yield


@pytest.fixture(autouse=True)
def _reset_dtype():
    yield
    T.set_default_dtype(np.float32)
