import numpy as np
import pytest

from vlk.labeling import assign_voxel_labels
from vlk.phantom import default_cow_spec, generate_phantom


@pytest.fixture(scope="session")
def cow96():
    seg, cl, vel = generate_phantom(default_cow_spec((96, 96, 96), 7))
    return seg, cl, vel, assign_voxel_labels(seg, cl)


@pytest.fixture(scope="session")
def cow64():
    seg, cl, vel = generate_phantom(default_cow_spec((64, 64, 64), 3))
    return seg, cl, vel, assign_voxel_labels(seg, cl)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
