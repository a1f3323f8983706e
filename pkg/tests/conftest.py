import numpy as np
import pytest

from repvsr import backend
from repvsr import tensor as T

BACKENDS = backend.available()


@pytest.fixture(params=BACKENDS)
def kernel_backend(request):
    previous = backend.name
    backend.use(request.param)
    yield request.param
    backend.use(previous)


@pytest.fixture(autouse=True)
def _reset_precision():
    mode = T.get_precision()
    yield
    T.set_precision(mode)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
