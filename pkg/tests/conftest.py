import numpy as np
import pytest

from pcfsmooth.borel import build_bases
from pcfsmooth.bump import BumpConfig, BumpProblem, iterate_to_fixed_point
from pcfsmooth.energy import build_stack
from pcfsmooth.fractal import interval, sierpinski_gasket


@pytest.fixture(scope="session")
def I10():
    return build_stack(interval(), 10)


@pytest.fixture(scope="session")
def I9():
    return build_stack(interval(), 9)


@pytest.fixture(scope="session")
def SG7():
    return build_stack(sierpinski_gasket(), 7)


@pytest.fixture(scope="session")
def SG8():
    return build_stack(sierpinski_gasket(), 8)


@pytest.fixture(scope="session")
def interval_bump(I10):
    prob = BumpProblem(I10, BumpConfig(l1=3, l2=3))
    return prob, iterate_to_fixed_point(prob)


@pytest.fixture(scope="session")
def sg_bump(SG8):
    prob = BumpProblem(SG8, BumpConfig(l1=2, l2=2))
    return prob, iterate_to_fixed_point(prob)


@pytest.fixture(scope="session")
def interval_basis(I10, interval_bump):
    return build_bases(I10, interval_bump[1].expr(), 3, 3)


@pytest.fixture(scope="session")
def sg_basis(SG8, sg_bump):
    return build_bases(SG8, sg_bump[1].expr(), 3, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
