import json

import numpy as np
import pytest

from certipose import geometry as geo
from certipose.errors import NonPositiveDepth, NotARotation
from certipose.geometry import CameraIntrinsics, Pose, Quaternion

from conftest import random_pose


def homogeneous_oracle(points, intr, pose):
    """Independent per-point scalar-arithmetic projection."""
    out = []
    m = pose.matrix()
    for p in np.atleast_2d(points):
        ph = m @ np.array([p[0], p[1], p[2], 1.0])
        x, y, z = ph[0], ph[1], ph[2]
        out.append((intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy))
    return np.array(out)


class TestProjection:
    def test_optical_axis_point_maps_to_principal_point(self):
        intr = CameraIntrinsics(100, 100, 64, 64, 128, 128)
        pose = Pose(np.eye(3), [0, 0, 1])
        uv = geo.project_points([[0, 0, 0]], intr, pose)
        assert np.allclose(uv, [[64, 64]])

    def test_offset_point(self):
        intr = CameraIntrinsics(100, 100, 64, 64, 128, 128)
        pose = Pose(np.eye(3), [0, 0, 1])
        uv = geo.project_points([[0.01, 0, 0]], intr, pose)
        assert np.allclose(uv, [[65, 64]])

    def test_matches_scalar_oracle(self, intrinsics, rng):
        for _ in range(10):
            pose = random_pose(rng)
            pts = rng.uniform(-0.15, 0.15, size=(14, 3))
            got = geo.project_points(pts, intrinsics, pose)
            want = homogeneous_oracle(pts, intrinsics, pose)
            assert np.abs(got - want).max() < 1e-12 * max(1.0, np.abs(want).max())

    def test_non_positive_depth_raises(self, intrinsics):
        pose = Pose(np.eye(3), [0, 0, -1])
        with pytest.raises(NonPositiveDepth):
            geo.project_points([[0, 0, 0]], intrinsics, pose)

    def test_identity_compose_invariance(self, intrinsics, rng):
        pose = random_pose(rng)
        pts = rng.uniform(-0.1, 0.1, size=(5, 3))
        a = geo.project_points(pts, intrinsics, pose)
        b = geo.project_points(pts, intrinsics,
                               geo.compose(Pose.identity(), pose))
        assert np.array_equal(a, b)


class TestPoseGroup:
    def test_identity_compose(self, rng):
        p = random_pose(rng)
        q = geo.compose(Pose.identity(), p)
        assert np.allclose(q.matrix(), p.matrix(), atol=1e-15)

    def test_compose_matches_homogeneous_product(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        got = geo.compose(a, b).matrix()
        want = a.matrix() @ b.matrix()
        assert np.abs(got - want).max() < 1e-12

    def test_invert_trivial(self):
        p = Pose(np.eye(3), [0, 0, 2])
        inv = geo.invert(p)
        assert np.allclose(inv.translation, [0, 0, -2])
        assert np.allclose(geo.invert(Pose.identity()).matrix(), np.eye(4))

    def test_compose_with_inverse_is_identity(self, rng):
        for _ in range(10):
            p = random_pose(rng)
            assert np.abs(geo.compose(p, geo.invert(p)).matrix()
                          - np.eye(4)).max() < 1e-9

    def test_rotation_validated(self):
        with pytest.raises(NotARotation):
            Pose(np.eye(3) * 1.1, np.zeros(3))


class TestCalibrationChain:
    def test_all_identity(self):
        ident = Pose.identity()
        out = geo.satellite_to_camera_gt(ident, ident, ident)
        assert np.allclose(out.matrix(), np.eye(4))

    def test_chain_collapse(self, rng):
        b2g, g2c = random_pose(rng), random_pose(rng)
        b2s = geo.compose(b2g, g2c)  # camera coincides with satellite
        out = geo.satellite_to_camera_gt(b2g, g2c, b2s)
        assert np.abs(out.matrix() - np.eye(4)).max() < 1e-9

    def test_matches_homogeneous_oracle(self, rng):
        b2g, g2c, b2s = (random_pose(rng) for _ in range(3))
        got = geo.satellite_to_camera_gt(b2g, g2c, b2s).matrix()
        want = np.linalg.inv(b2s.matrix()) @ b2g.matrix() @ g2c.matrix()
        assert np.abs(got - want).max() < 1e-9

    def test_recovers_s2c_through_base2satellite(self, rng):
        b2g, g2c, s2c = (random_pose(rng) for _ in range(3))
        b2s = geo.base_to_satellite(b2g, g2c, s2c)
        got = geo.satellite_to_camera_gt(b2g, g2c, b2s)
        assert np.abs(got.matrix() - s2c.matrix()).max() < 1e-9


class TestQuaternion:
    def test_identity(self):
        q = geo.rotation_to_quaternion(np.eye(3))
        assert q == Quaternion(1.0, 0.0, 0.0, 0.0)

    def test_half_turn_about_z(self):
        r = geo.axis_angle_to_rotation([0, 0, np.pi])
        q = geo.rotation_to_quaternion(r)
        assert np.allclose(q.as_array(), [0, 0, 0, 1], atol=1e-12)

    def test_round_trip(self, rng):
        for _ in range(50):
            p = random_pose(rng)
            q = geo.rotation_to_quaternion(p.rotation)
            assert abs(q.norm() - 1.0) < 1e-9
            r = geo.quaternion_to_rotation(q)
            assert np.abs(r - p.rotation).max() < 1e-9
            q2 = geo.rotation_to_quaternion(r)
            assert np.abs(q2.as_array() - q.as_array()).max() < 1e-9

    def test_sign_canonicalization(self, rng):
        p = random_pose(rng)
        q = geo.rotation_to_quaternion(p.rotation)
        assert q.w >= 0

    def test_rejects_non_rotation(self):
        with pytest.raises(NotARotation):
            geo.rotation_to_quaternion(np.eye(3) + 1e-3)


class TestSerialization:
    def test_pose_record_round_trip(self, rng):
        pose = random_pose(rng)
        rec = geo.pose_to_record(1.25, pose)
        blob = json.dumps(rec)
        t, back = geo.pose_from_record(json.loads(blob))
        assert t == 1.25
        assert np.abs(back.matrix() - pose.matrix()).max() < 1e-9

    def test_intrinsics_round_trip(self, intrinsics):
        d = intrinsics.to_json_dict()
        assert CameraIntrinsics.from_json_dict(json.loads(json.dumps(d))) == intrinsics


class TestCadModel:
    def test_basic(self, rng):
        pts = rng.normal(size=(50, 3))
        m = geo.CadModel(pts)
        assert len(m) == 50
        want = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
        assert m.extent == pytest.approx(want, abs=1e-12)

    def test_rejects_empty_and_bad_shape(self):
        with pytest.raises(ValueError):
            geo.CadModel(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            geo.CadModel(np.zeros((5, 2)))

    def test_rejects_non_finite(self):
        pts = np.zeros((3, 3))
        pts[1, 2] = np.nan
        with pytest.raises(ValueError):
            geo.CadModel(pts)


class TestLandmarkSet:
    def test_basic(self, rng):
        pts = rng.normal(size=(8, 3))
        ls = geo.LandmarkSet(pts)
        assert len(ls) == 8 and ls.z == 8

    def test_rejects_fewer_than_six(self, rng):
        with pytest.raises(ValueError):
            geo.LandmarkSet(rng.normal(size=(5, 3)))

    def test_rejects_coplanar(self, rng):
        pts = rng.normal(size=(8, 3))
        pts[:, 2] = 0.5          # all in one plane
        with pytest.raises(ValueError):
            geo.LandmarkSet(pts)

    def test_accepts_barely_non_coplanar(self, rng):
        pts = rng.normal(size=(8, 3))
        pts[:, 2] = 0.0
        pts[0, 2] = 0.01
        geo.LandmarkSet(pts)

    def test_rejects_non_finite(self, rng):
        pts = rng.normal(size=(7, 3))
        pts[0, 0] = np.inf
        with pytest.raises(ValueError):
            geo.LandmarkSet(pts)
