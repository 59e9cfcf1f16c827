import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mfgreg.fields import DiffPlan, SpaceTimeGrid, TimeGrid, TorusGrid  # noqa: E402
from mfgreg.problem import MFGProblem  # noqa: E402

DATA = Path(__file__).parent / "data"


def make_grid(nt: int = 16, nx: int = 16, horizon: float = 1.0, dim: int = 1) -> SpaceTimeGrid:
    return SpaceTimeGrid(TimeGrid(horizon, nt), TorusGrid(dim, nx))


def bump(amplitude: float = 0.05):
    return lambda x: 1.0 + amplitude * np.sin(2 * np.pi * x)


@pytest.fixture
def grid16():
    return make_grid(16, 16)


@pytest.fixture
def plan16(grid16):
    return DiffPlan(grid16, 3)


@pytest.fixture
def trivial16(grid16):
    return MFGProblem(grid16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria: one pass/fail line each in the terminal summary
_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.failed:
        _CRITERIA.setdefault(report.nodeid, report)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_CRITERIA):
        rep = _CRITERIA[nodeid]
        name = nodeid.split("::test_criterion_")[1]
        number, _, title = name.partition("_")
        detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
        status = "PASS" if rep.passed else "FAIL"
        terminalreporter.write_line(f"criterion {int(number):2d} {status}  {title.replace('_', ' ')}: {detail}")
