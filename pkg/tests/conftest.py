from pathlib import Path

import pytest

from ovpseudo import _accel

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def kernel_path(request):
    """Run a test once per kernel implementation."""
    if request.param and not _accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    previous = _accel.set_numba(request.param)
    yield request.param
    _accel.set_numba(previous)


def pytest_terminal_summary(terminalreporter):
    results = getattr(__import__("sys").modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
