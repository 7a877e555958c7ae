import math

import numpy as np
import pytest

from simstex.fixtures import cube, subdivided_quad, unit_quad, uv_sphere
from simstex.geometry import Camera


@pytest.fixture
def quad():
    return unit_quad()


@pytest.fixture
def box():
    return cube()


@pytest.fixture
def sphere():
    return uv_sphere()


def full_frame_camera(distance=1.5, image=64):
    """Camera for which the unit quad fills the viewport exactly."""
    fov = 2.0 * math.atan(0.5 / distance)
    return Camera((distance, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                  fov, image, image)


def rand_texture(rng, h=64, w=64, c=4):
    return rng.standard_normal((h, w, c)).astype(np.float32)
