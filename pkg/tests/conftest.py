import numpy as np
import pytest

from certipose.geometry import CameraIntrinsics, Pose, axis_angle_to_rotation


def random_pose(rng, max_angle=np.pi, depth=(0.8, 2.0)):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    r = axis_angle_to_rotation(axis * angle)
    t = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                  rng.uniform(*depth)])
    return Pose(r, t)


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=128.0, cy=128.0,
                            width=256, height=256)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
