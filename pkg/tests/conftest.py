import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


_OUTCOMES = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    key = mark.args
    if rep.skipped:
        _OUTCOMES.setdefault(key, "SKIP")
    elif rep.failed:
        _OUTCOMES[key] = "FAIL"
    elif rep.when == "call":
        _OUTCOMES.setdefault(key, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), status in sorted(_OUTCOMES.items()):
        terminalreporter.write_line(f"criterion {n:2d} {status:4s} {title}")
