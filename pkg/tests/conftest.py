import numpy as np
import pytest

from s2kd import tensor as T


@pytest.fixture(autouse=True)
def _float_width_guard():
    previous = T.float_width()
    yield
    T.set_float_width(previous)


@pytest.fixture
def f64():
    with T.using_float_width(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    log = sys.modules.get("acceptance_log")
    if log is None or not log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(log.RESULTS):
        passed, detail = log.RESULTS[key]
        terminalreporter.write_line(f"{key}: {'PASS' if passed else 'FAIL'} - {detail}")
