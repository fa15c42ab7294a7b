"""Rigid-body poses, quaternions, camera intrinsics and pinhole projection.

Conventions:
    - A Pose maps satellite body-frame points into the camera frame:
      p_cam = R @ p_body + t.
    - Rotations are stored as 3x3 matrices; quaternions appear only at the
      metric/serialization boundary.
    - Pixel coordinates are (x, y) = (column, row), origin at the top-left
      pixel center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth, NotARotation

MIN_DEPTH = 1e-9

_ORTHO_TOL = 1e-6


def _check_rotation(r: np.ndarray, tol: float = _ORTHO_TOL) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise NotARotation(f"expected 3x3 matrix, got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise NotARotation("rotation contains non-finite entries")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > tol:
        raise NotARotation(f"R^T R deviates from identity by {err:.3e}")
    det = np.linalg.det(r)
    if abs(det - 1.0) > tol:
        raise NotARotation(f"det(R) = {det:.9f}, expected +1")
    return r


class Pose:
    """Rigid transform (R, t): p_out = R @ p_in + t."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation, check: bool = True):
        r = np.asarray(rotation, dtype=float)
        t = np.asarray(translation, dtype=float).reshape(3)
        if check:
            r = _check_rotation(r)
            if not np.all(np.isfinite(t)):
                raise ValueError("translation contains non-finite entries")
        self.rotation = r
        self.translation = t

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3), check=False)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix form T(R, t)."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m, check: bool = True) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, :3], m[:3, 3], check=check)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def __repr__(self):
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """Transform equivalent to applying b first, then a: T(a) @ T(b)."""
    return Pose(a.rotation @ b.rotation,
                a.rotation @ b.translation + a.translation, check=False)


def invert(a: Pose) -> Pose:
    """(R, t) -> (R^T, -R^T t)."""
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation, check=False)


def satellite_to_camera_gt(base_to_gripper: Pose, gripper_to_camera: Pose,
                           base_to_satellite: Pose) -> Pose:
    """Ground-truth calibration chain T = T(b2s)^-1 T(b2g) T(g2c)."""
    return compose(invert(base_to_satellite),
                   compose(base_to_gripper, gripper_to_camera))


def base_to_satellite(base_to_gripper: Pose, gripper_to_camera: Pose,
                      satellite_to_camera: Pose) -> Pose:
    """T(b2s) = T(b2g) T(g2c) T(s2c)^-1 (companion of the chain above)."""
    return compose(compose(base_to_gripper, gripper_to_camera),
                   invert(satellite_to_camera))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the frame")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_json_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_json_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(fx=float(d["fx"]), fy=float(d["fy"]),
                                cx=float(d["cx"]), cy=float(d["cy"]),
                                width=int(d["width"]), height=int(d["height"]))


class CadModel:
    """Dense 3D surface point cloud in the satellite body frame."""

    __slots__ = ("points", "extent")

    def __init__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.size == 0 or pts.shape[1] != 3:
            raise ValueError("model needs at least one 3D point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("model points must be finite")
        self.points = pts
        self.extent = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    def __len__(self):
        return self.points.shape[0]


_COPLANAR_TOL = 1e-6


class LandmarkSet:
    """The Z selected 3D landmarks, body frame.

    Requires Z >= 6 (margin over the minimal PnP instance) and a
    non-coplanar configuration, which degrades PnP conditioning.
    """

    __slots__ = ("landmarks",)

    def __init__(self, landmarks):
        pts = np.atleast_2d(np.asarray(landmarks, dtype=float))
        if pts.shape[0] < 6 or pts.shape[1] != 3:
            raise ValueError("need at least 6 landmarks")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmarks must be finite")
        centered = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[2] <= _COPLANAR_TOL:
            raise ValueError("landmarks are coplanar within tolerance")
        self.landmarks = pts

    def __len__(self):
        return self.landmarks.shape[0]

    @property
    def z(self) -> int:
        return self.landmarks.shape[0]


def project_points(points, intrinsics: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Pinhole-project (N, 3) body-frame points to (N, 2) pixel coordinates.

    Raises NonPositiveDepth if any transformed point has camera-frame
    z <= 1e-9.  Projections may fall outside the frame bounds.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cam = pose.apply(pts)
    z = cam[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth(
            f"{int(np.sum(z <= MIN_DEPTH))} point(s) at depth <= {MIN_DEPTH}")
    u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    return np.column_stack([u, v])


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion, scalar-first (w, x, y, z)."""
    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


def _canonical_sign(q: np.ndarray) -> np.ndarray:
    # w >= 0; on w == 0 the first nonzero of (x, y, z) is made >= 0
    for c in q:
        if c > 0:
            return q
        if c < 0:
            return -q
    return q


def rotation_to_quaternion(r) -> Quaternion:
    """Convert an orthonormal matrix (det +1) to a canonical unit quaternion."""
    r = _check_rotation(np.asarray(r, dtype=float))
    # Shepperd's method: pick the largest of the four squared components.
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    choices = [tr, r[0, 0], r[1, 1], r[2, 2]]
    i = int(np.argmax(choices))
    if i == 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    elif i == 1:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s,
                      0.25 * s,
                      (r[0, 1] + r[1, 0]) / s,
                      (r[0, 2] + r[2, 0]) / s])
    elif i == 2:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array([(r[0, 2] - r[2, 0]) / s,
                      (r[0, 1] + r[1, 0]) / s,
                      0.25 * s,
                      (r[1, 2] + r[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array([(r[1, 0] - r[0, 1]) / s,
                      (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s,
                      0.25 * s])
    q = _canonical_sign(q / np.linalg.norm(q))
    return Quaternion(*q)


def quaternion_to_rotation(q: Quaternion) -> np.ndarray:
    w, x, y, z = q.as_array() / q.norm()
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle_to_rotation(axis_angle) -> np.ndarray:
    """Rodrigues formula; input is axis * angle (radians)."""
    w = np.asarray(axis_angle, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        k = skew(w)
        return np.eye(3) + k + 0.5 * (k @ k)
    axis = w / theta
    k = skew(axis)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def pose_to_record(t_s: float, pose: Pose) -> dict:
    """JSON record: { "t_s": seconds, "q_wxyz": [w,x,y,z], "t_m": [x,y,z] }."""
    q = rotation_to_quaternion(pose.rotation)
    return {"t_s": float(t_s),
            "q_wxyz": [q.w, q.x, q.y, q.z],
            "t_m": [float(v) for v in pose.translation]}


def pose_from_record(rec: dict) -> tuple[float, Pose]:
    q = Quaternion(*[float(v) for v in rec["q_wxyz"]])
    if abs(q.norm() - 1.0) > 1e-6:
        raise NotARotation(f"record quaternion norm {q.norm():.6f} != 1")
    return float(rec["t_s"]), Pose(quaternion_to_rotation(q), rec["t_m"], check=False)
