import numpy as np
import pytest

from bohmscar.geometry import Rectangle, Stadium
from bohmscar.packet import CoherentParams, coherent_state, project
from bohmscar.pipeline import estimate_e_max
from bohmscar.spectral import build_grid, solve_eigen


@pytest.fixture(scope="session")
def stadium():
    return Stadium()


@pytest.fixture(scope="session")
def square_basis():
    dom = Rectangle(1.0, 1.0)
    grid = build_grid(dom, 8, 625.0)
    return solve_eigen(dom, grid, 625.0)


@pytest.fixture(scope="session")
def packet():
    return CoherentParams()


@pytest.fixture(scope="session")
def stadium_basis(stadium, packet):
    """Default-resolution basis, raised until the packet is captured."""
    e = estimate_e_max(packet, 0.999)
    grid = build_grid(stadium, 8, e)
    return solve_eigen(stadium, grid, e)


@pytest.fixture(scope="session")
def state0(stadium_basis, packet):
    return project(coherent_state(packet, stadium_basis.grid), stadium_basis)


@pytest.fixture(scope="session")
def fine_basis(stadium):
    """Higher cutoff, for pointwise field values that need nearly full capture."""
    grid = build_grid(stadium, 8, 6000.0)
    return solve_eigen(stadium, grid, 6000.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def record():
    def _record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = ("PASS" if passed else "FAIL", detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")
