"""Correction targets from a certified pose and the heatmap MSE loss.

The corrector projects the 3D landmarks under the certified pose, maps
them into the regressor's crop, and builds one target map per landmark:
a single 1 at the rounded pixel (one-hot), optionally Gaussian-smoothed.
Landmarks falling outside the crop are masked out and excluded from the
loss average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllLandmarksOutOfCrop, NoActiveMaps
from .geometry import CameraIntrinsics, LandmarkSet, Pose, project_points
from .regressor import (CropTransform, HeatmapSet, Landmarks2D,
                        gaussian_target)


@dataclass
class CorrectionTarget:
    target_heatmaps: HeatmapSet       # one-hot by default
    projected_landmarks: Landmarks2D  # full-frame pixels
    active: np.ndarray                # (Z,) bool, in-crop mask
    crop_points: np.ndarray           # (Z, 2) pre-rounding crop coordinates


def build_targets(landmarks: LandmarkSet, intrinsics: CameraIntrinsics,
                  pose: Pose, crop_transform: CropTransform,
                  crop_size: int = 64, sigma: float | None = None) -> CorrectionTarget:
    """Target heatmaps at the landmark projections under `pose`.

    One-hot at the nearest pixel unless `sigma` requests Gaussian
    smoothing.  Raises NonPositiveDepth for landmarks behind the camera
    and AllLandmarksOutOfCrop when no landmark lands inside the crop.
    """
    uv = project_points(landmarks.landmarks, intrinsics, pose)
    crop_uv = crop_transform.inverse_apply(uv)
    rounded = np.round(crop_uv).astype(int)
    z = len(landmarks)
    active = ((rounded[:, 0] >= 0) & (rounded[:, 0] < crop_size)
              & (rounded[:, 1] >= 0) & (rounded[:, 1] < crop_size))
    if not active.any():
        raise AllLandmarksOutOfCrop(f"all {z} landmarks project outside "
                                    f"the {crop_size}x{crop_size} crop")
    maps = np.zeros((z, crop_size, crop_size))
    for i in range(z):
        if not active[i]:
            continue
        if sigma is None:
            maps[i, rounded[i, 1], rounded[i, 0]] = 1.0
        else:
            maps[i] = gaussian_target(crop_uv[i], crop_size, sigma)
    heatmaps = HeatmapSet(maps=maps, crop_transform=crop_transform)
    lm = Landmarks2D(points=uv, confidences=active.astype(float))
    return CorrectionTarget(target_heatmaps=heatmaps, projected_landmarks=lm,
                            active=active, crop_points=crop_uv)


def heatmap_loss(predicted: HeatmapSet, target: CorrectionTarget):
    """Average per-map MSE over active maps.

    Returns (loss, gradient w.r.t. predicted maps); inactive maps get a
    zero gradient block.
    """
    pred = predicted.maps
    tgt = target.target_heatmaps.maps
    if pred.shape != tgt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {tgt.shape}")
    z_active = int(target.active.sum())
    if z_active == 0:
        raise NoActiveMaps("no landmark projects inside the crop")
    s2 = pred.shape[1] * pred.shape[2]
    diff = pred - tgt
    diff[~target.active] = 0.0
    loss = float(np.sum(diff ** 2)) / (z_active * s2)
    grad = 2.0 * diff / (z_active * s2)
    return loss, grad


def _bilinear_stencil(point):
    """4-neighbour bilinear weights of a unit mass at `point` and their
    derivatives w.r.t. the point coordinates."""
    x, y = float(point[0]), float(point[1])
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    ax, ay = x - x0, y - y0
    cells, weights, dwdx, dwdy = [], [], [], []
    for dy in (0, 1):
        for dx in (0, 1):
            wx = ax if dx else 1.0 - ax
            wy = ay if dy else 1.0 - ay
            gx = (1.0 if dx else -1.0) * wy
            gy = (1.0 if dy else -1.0) * wx
            cells.append((x0 + dx, y0 + dy))
            weights.append(wx * wy)
            dwdx.append(gx)
            dwdy.append(gy)
    return cells, weights, dwdx, dwdy


def target_position_gradient(predicted: HeatmapSet,
                             target: CorrectionTarget) -> np.ndarray:
    """d(loss)/d(crop position of each target), shape (Z, 2).

    The forward pass rounds the target to one pixel; for the backward
    pass the target is treated as a unit mass placed bilinearly at the
    pre-rounding position, which gives a usable sub-gradient where the
    rounded placement is piecewise constant.  Inactive maps get zeros.
    """
    pred = predicted.maps
    z, s, _ = pred.shape
    z_active = int(target.active.sum())
    if z_active == 0:
        raise NoActiveMaps("no landmark projects inside the crop")
    scale = 2.0 / (z_active * s * s)
    out = np.zeros((z, 2))
    for i in range(z):
        if not target.active[i]:
            continue
        cells, weights, dwdx, dwdy = _bilinear_stencil(target.crop_points[i])
        gx = gy = 0.0
        for (cx, cy), w, dx_, dy_ in zip(cells, weights, dwdx, dwdy):
            if not (0 <= cx < s and 0 <= cy < s):
                continue
            resid = w - pred[i, cy, cx]     # d/dtarget of (pred - target)^2
            gx += resid * dx_
            gy += resid * dy_
        out[i, 0] = scale * gx
        out[i, 1] = scale * gy
    return out
