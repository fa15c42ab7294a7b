"""Pose error metrics and ground-truth association.

Per frame: relative translation error phi = ||t - t_hat|| / ||t|| and
quaternion geodesic rotation error psi = 2 arccos(|<q, q_hat>|).
Sequence level: Phi and Psi are arithmetic means over evaluated frames;
medians are reported alongside for robustness against outlying frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoEvaluableFrames, ZeroGroundTruthTranslation
from .events import EventFrame
from .geometry import Pose, Quaternion, rotation_to_quaternion


@dataclass
class PoseErrors:
    per_frame: list            # (phi, psi) tuples, evaluated frames only
    Phi: float                 # mean phi
    Psi: float                 # mean psi (radians)
    median_phi: float
    median_psi: float
    frame_count: int
    skipped: int               # frames with absent poses


def translation_error(gt, est) -> float:
    gt = np.asarray(gt, dtype=float).reshape(3)
    est = np.asarray(est, dtype=float).reshape(3)
    denom = np.linalg.norm(gt)
    if denom <= 1e-12:
        raise ZeroGroundTruthTranslation("ground-truth translation is zero")
    return float(np.linalg.norm(gt - est) / denom)


def rotation_error(gt: Quaternion, est: Quaternion) -> float:
    # 2 arccos(|<q, q_hat>|), computed through the chord form
    # 4 arcsin(min(||q - q_hat||, ||q + q_hat||) / 2): analytically equal,
    # but exact at 0 where arccos amplifies rounding in the dot product.
    a, b = gt.as_array(), est.as_array()
    chord = min(np.linalg.norm(a - b), np.linalg.norm(a + b))
    return float(4.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0)))


def pose_errors(gt: Pose, est: Pose) -> tuple[float, float]:
    """(phi, psi) for a ground-truth/estimate pose pair."""
    phi = translation_error(gt.translation, est.translation)
    psi = rotation_error(rotation_to_quaternion(gt.rotation),
                         rotation_to_quaternion(est.rotation))
    return phi, psi


def aggregate(per_frame, skipped: int = 0) -> PoseErrors:
    """Means and medians over evaluated frames; `skipped` counts frames
    excluded for absent poses."""
    pairs = [(float(p), float(s)) for p, s in per_frame]
    if not pairs:
        raise NoEvaluableFrames("no frames with both ground truth and estimate")
    phis = np.array([p for p, _ in pairs])
    psis = np.array([s for _, s in pairs])
    return PoseErrors(per_frame=pairs,
                      Phi=float(phis.mean()), Psi=float(psis.mean()),
                      median_phi=float(np.median(phis)),
                      median_psi=float(np.median(psis)),
                      frame_count=len(pairs), skipped=int(skipped))


def associate(frames: list, gt_poses: list) -> list:
    """Pair each ground-truth (timestamp, Pose) with the frame whose window
    midpoint is nearest in time; ties go to the earlier frame.

    Returns a list of (frame_index, frame, Pose).
    """
    if not frames or not gt_poses:
        return []
    mids = np.array([f.t_mid_s for f in frames])
    out = []
    for t, pose in gt_poses:
        d = np.abs(mids - float(t))
        idx = int(np.argmin(d))        # argmin returns the first (earlier) tie
        out.append((idx, frames[idx], pose))
    return out
