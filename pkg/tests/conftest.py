import math

import numpy as np
import pytest

from bumpsplit.eigen import calibrate_tau, detect_clusters, solve_lowest
from bumpsplit.fem import assemble
from bumpsplit.geometry import PolygonalDomain
from bumpsplit.mesh import triangulate

PI2 = math.pi**2


def square_levels(n):
    """First n Dirichlet eigenvalues of the unit square, closed form."""
    vals = sorted(PI2 * (a * a + b * b) for a in range(1, 12) for b in range(1, 12))
    return np.array(vals[:n])


@pytest.fixture(scope="session")
def square():
    return PolygonalDomain.unit_square()


@pytest.fixture(scope="session")
def square_mesh(square):
    return triangulate(square, 0.02)


@pytest.fixture(scope="session")
def square_system(square_mesh):
    return assemble(square_mesh, "dirichlet")


@pytest.fixture(scope="session")
def square_spectrum(square_system):
    return detect_clusters(solve_lowest(square_system, 12, 1e-10), calibrate_tau(0.02))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
