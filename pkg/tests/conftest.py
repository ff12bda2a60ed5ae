import numpy as np
import pytest

from surrounddepth import synth
from surrounddepth.geometry import CameraModel, PoseSE3


@pytest.fixture(scope="session")
def rig():
    return synth.build_rig()


@pytest.fixture(scope="session")
def scene():
    return synth.default_scene(seed=0)


@pytest.fixture(scope="session")
def frames(scene, rig):
    """Per-view (Image, DepthMap) of the default scene at the identity vehicle pose."""
    return synth.render(scene, rig)


@pytest.fixture
def cam100():
    """fx = fy = 100, principal point (50, 50), 101 x 101 pixels."""
    return CameraModel(100.0, 100.0, 50.0, 50.0, 101, 101)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
