import numpy as np
import pytest

from cemeit.fem import ElectrodeModel, adjacent_patterns
from cemeit.mesh import build_disk_mesh
from cemeit.simulate import COARSE_MESH, DENSE_MESH

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def small_mesh():
    return build_disk_mesh(1.0, 16, 0.45, 200, edges_per_electrode=1)


@pytest.fixture(scope="session")
def mid_mesh():
    return build_disk_mesh(1.0, 16, 0.45, 1200, edges_per_electrode=2)


@pytest.fixture(scope="session")
def coarse_mesh():
    return build_disk_mesh(1.0, 16, 0.45, **COARSE_MESH)


@pytest.fixture(scope="session")
def dense_mesh():
    return build_disk_mesh(1.0, 16, 0.45, **DENSE_MESH)


@pytest.fixture(scope="session")
def electrodes():
    return ElectrodeModel.uniform(16, 1e-2)


@pytest.fixture(scope="session")
def patterns():
    return adjacent_patterns(16, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
