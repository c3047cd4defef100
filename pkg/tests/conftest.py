import numpy as np
import pytest

from dynloc.core import LabelPartition
from dynloc.sim import default_world, localization_spec, mapping_spec, simulate


@pytest.fixture(scope="session")
def partition():
    return LabelPartition.semantic_kitti()


@pytest.fixture(scope="session")
def world():
    return default_world(0)


@pytest.fixture(scope="session")
def short_mapping(world):
    return simulate(mapping_spec(world, 1, duration=8.0))


@pytest.fixture(scope="session")
def short_localization(world):
    return simulate(localization_spec(world, 1, 3, duration=8.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
