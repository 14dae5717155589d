import numpy as np
import pytest

from advtraffic.geometry import MapModel
from advtraffic.mapgen import MapTemplate, generate_map


@pytest.fixture(scope="session")
def square_map():
    """40 m drivable square; plenty of interior for geometry tests."""
    poly = np.array([[0.0, 0.0], [40.0, 0.0], [40.0, 40.0], [0.0, 40.0]])
    return MapModel("square40", [poly])


@pytest.fixture(scope="session")
def straight_map():
    return generate_map(MapTemplate(kind="two_lane_straight"))


@pytest.fixture(scope="session")
def fourway_map():
    return generate_map(MapTemplate(kind="four_way_intersection"))
