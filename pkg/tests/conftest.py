import numpy as np
import pytest

from dwih.volume import Volume3D

SPACING = (0.5, 0.5, 3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_volume(data, spacing=SPACING):
    return Volume3D(np.asarray(data), spacing)


# one PASS/FAIL line per acceptance criterion, printed after the run
_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if rep.failed:
        _ACCEPTANCE[number] = ("FAIL", title)
    elif rep.skipped:
        _ACCEPTANCE[number] = ("SKIP", title)
    elif rep.when == "call" and number not in _ACCEPTANCE:
        _ACCEPTANCE[number] = ("PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{status}  criterion {number:2d}  {title}")
