import numpy as np
import pytest

from ctxrank import tensor as T


@pytest.fixture(autouse=True)
def _finite_checks():
    T.set_check_finite(True)
    yield
    T.set_check_finite(False)
    T.TAPE.clear()


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield
