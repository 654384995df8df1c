import numpy as np
import pytest

import cfa_pose as cp


@pytest.fixture(scope="session")
def skel():
    return cp.mpii_skeleton()


@pytest.fixture(scope="session")
def geom96():
    return cp.HeatmapGeometry.for_image(96)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
