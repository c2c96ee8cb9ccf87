import numpy as np
import pytest

from irs_vlp.channel import orientation_set
from irs_vlp.estimation import EstimatorConfig
from irs_vlp.scene import Led, build_scene

from tests.helpers import DOWN, ROOM, UP, make_scene, mismatch


@pytest.fixture
def los_scene():
    """One downward LED at (0, 0, 3), no IRS, LOS path open."""
    led = Led(position=np.array([0.0, 0.0, 3.0]), orientation=DOWN)
    return build_scene([led], None, UP, 1e-4, [1e-17], ROOM, los_blocked=False)


@pytest.fixture
def tiny_scene():
    """Four ceiling LEDs and one IRS element per wall."""
    return make_scene(per_wall_count=1)


@pytest.fixture(scope="session")
def desk_scene():
    """Four ceiling LEDs and 49 elements per wall (196 total)."""
    return make_scene(per_wall_count=49)


@pytest.fixture(scope="session")
def mismatched_desk_scene(desk_scene):
    return mismatch(desk_scene, k=1.0, seed=1)


@pytest.fixture
def coarse_estimator():
    return EstimatorConfig(grid_resolution=0.25)


@pytest.fixture
def sets():
    """(true, assumed) orientation sets of a scene."""
    def _sets(scene):
        return orientation_set(scene, "true"), orientation_set(scene, "assumed")
    return _sets
