"""Test-time self-supervision loop and the plain inference path.

Per epoch the frames are shuffled (seeded), grouped into batches, and each
frame runs detect -> regress -> soft-argmax -> RANSAC PnP -> certify.
Certified frames produce correction targets from their own solved pose and
a heatmap-loss gradient that flows both directly into the predicted maps
and through the pose dependence of the targets (implicit differentiation
through the PnP optimum), updating the regressor weights.  The certifier
threshold anneals after every epoch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .certifier import Certificate, CertifierConfig, anneal, certify
from .corrector import build_targets, heatmap_loss, target_position_gradient
from .errors import (AllLandmarksOutOfCrop, DegenerateConfiguration,
                     EmptyFrame, NoActiveMaps, NoConsensus, NonFiniteGradient,
                     NonPositiveDepth, NotAtOptimum, SingularHessian,
                     TooFewPoints)
from .events import detect_bbox
from .geometry import CadModel, CameraIntrinsics, LandmarkSet, Pose
from .pnp import (Correspondence, PnpSolution, _projection_jacobians,
                  pnp_gradient, ransac_pnp)
from .regressor import (RegressorParams, backward_update, forward,
                        soft_argmax, soft_argmax_vjp)


@dataclass
class SelfSupConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_drop_epoch: int = 15       # x0.1 from this (1-based) epoch on
    lr_drop_factor: float = 0.1
    tau: float = 0.05             # batching window, seconds (per scenario)
    certifier: CertifierConfig = field(default_factory=CertifierConfig)
    seed: int = 0
    temperature: float = 1.0
    use_pose_path: bool = True    # gradient through the PnP solve
    use_best_epoch: bool = False  # report best-certification epoch weights

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass
class EpochReport:
    epoch: int
    certified_count: int
    total_count: int
    mean_loss: float              # over certified frames, nan if none
    epsilon: float                # threshold in force during this epoch
    wall_time_s: float            # excluded from deterministic outputs

    def __post_init__(self):
        if not (0 <= self.certified_count <= self.total_count):
            raise ValueError("certified_count out of range")


@dataclass
class InferenceResult:
    pose: Pose | None
    solution: PnpSolution | None
    landmarks_2d: object          # Landmarks2D or None
    box: object                   # BBox or None
    reason: str                   # "" when a pose is present


def learning_rate_at_epoch(config: SelfSupConfig, epoch: int) -> float:
    lr = config.learning_rate
    if epoch >= config.lr_drop_epoch:
        lr *= config.lr_drop_factor
    return lr


def _frame_seed(base_seed: int, frame_index: int) -> int:
    # stable per-frame RANSAC stream regardless of visit order
    return (base_seed * 1_000_003 + frame_index) % (2 ** 32)


def _predict(frame, params, temperature):
    box = detect_bbox(frame)
    maps, cache = forward(frame, box, params)
    lm = soft_argmax(maps, temperature)
    return box, maps, cache, lm


def _solve(landmarks: LandmarkSet, lm2d, intrinsics, seed):
    corrs = [Correspondence(landmarks.landmarks[i], lm2d.points[i])
             for i in range(len(landmarks))]
    sol = ransac_pnp(corrs, intrinsics, seed=seed)
    return corrs, sol


def infer(frames, params: RegressorParams, landmarks: LandmarkSet,
          intrinsics: CameraIntrinsics, temperature: float = 1.0,
          seed: int = 0, predict=None) -> list:
    """Run the base pipeline on every frame.

    `predict` overrides the network: a callable (frame, box) -> Landmarks2D,
    used by oracle tests; default is forward + soft-argmax.  Frames without
    a detectable box or PnP consensus yield an absent pose with a reason.
    """
    out = []
    for fi, frame in enumerate(frames):
        try:
            box = detect_bbox(frame)
        except EmptyFrame:
            out.append(InferenceResult(None, None, None, None, "empty-frame"))
            continue
        if predict is None:
            maps, _ = forward(frame, box, params)
            lm = soft_argmax(maps, temperature)
        else:
            lm = predict(frame, box)
        try:
            _, sol = _solve(landmarks, lm, intrinsics,
                            _frame_seed(seed, fi))
        except (NoConsensus, TooFewPoints, DegenerateConfiguration) as e:
            out.append(InferenceResult(None, None, lm, box,
                                       type(e).__name__))
            continue
        out.append(InferenceResult(sol.pose, sol, lm, box, ""))
    return out


def _pose_path_gradient(maps, cache, target, corrs, sol, landmarks,
                        intrinsics, temperature):
    """Gradient of the correction loss through the pose dependence of the
    targets: d(loss)/d(heatmaps) via target positions -> pose -> solved
    2D landmarks -> soft-argmax."""
    g_crop = target_position_gradient(maps, target)          # (Z, 2)
    a_inv = np.linalg.inv(maps.crop_transform.linear)
    g_full = g_crop @ a_inv                                  # row-vector chain
    cam = sol.pose.apply(landmarks.landmarks)
    jac = _projection_jacobians(cam, sol.pose.translation, intrinsics)
    g_theta = np.einsum("zij,zi->j", jac, g_full)            # (6,)
    dtheta_du = pnp_gradient(sol, corrs, intrinsics)         # (Z, 6, 2)
    g_points = np.einsum("j,zjk->zk", g_theta, dtheta_du)    # (Z, 2)
    return soft_argmax_vjp(maps, temperature, g_points)


def run_self_supervision(frames, params: RegressorParams, model: CadModel,
                         landmarks: LandmarkSet,
                         intrinsics: CameraIntrinsics,
                         config: SelfSupConfig, on_frame=None):
    """Certify-and-correct adaptation over the test frames.

    Returns (adapted params, list of EpochReport, final InferenceResult
    list).  `on_frame(epoch, frame_index, certificate, params)` is invoked
    after each processed frame; `certificate` is None when the pipeline
    failed before certification.
    """
    if not frames:
        raise ValueError("no frames to adapt on")
    params.check_finite()
    rng = np.random.default_rng(config.seed)
    cert_cfg = config.certifier
    n = len(frames)
    reports = []
    best = (-1, None)       # (certified_count, params snapshot)

    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        lr = learning_rate_at_epoch(config, epoch)
        order = rng.permutation(n)
        num_batches = n // config.batch_size
        if num_batches == 0:
            # fewer frames than one batch: visit them all once
            num_batches, batch_size = 1, n
        else:
            batch_size = config.batch_size
        certified = 0
        total = 0
        losses = []
        for b in range(num_batches):
            batch = order[b * batch_size:(b + 1) * batch_size]
            for fi in batch:
                fi = int(fi)
                total += 1
                cert = None
                try:
                    box, maps, cache, lm = _predict(frames[fi], params,
                                                    config.temperature)
                    corrs, sol = _solve(landmarks, lm, intrinsics,
                                        _frame_seed(config.seed, fi))
                except (EmptyFrame, NoConsensus, TooFewPoints,
                        DegenerateConfiguration):
                    if on_frame is not None:
                        on_frame(epoch, fi, None, params)
                    continue
                cert = certify(frames[fi], sol.pose, model.points,
                               intrinsics, cert_cfg)
                if cert.passed:
                    certified += 1
                    try:
                        target = build_targets(landmarks, intrinsics,
                                               sol.pose,
                                               maps.crop_transform,
                                               crop_size=params.crop_size)
                        loss, grad = heatmap_loss(maps, target)
                        if config.use_pose_path:
                            try:
                                grad = grad + _pose_path_gradient(
                                    maps, cache, target, corrs, sol,
                                    landmarks, intrinsics,
                                    config.temperature)
                            except (NotAtOptimum, SingularHessian):
                                pass    # direct path only for this frame
                        if lr > 0.0:
                            params = backward_update(params, cache, grad, lr)
                        losses.append(loss)
                    except (AllLandmarksOutOfCrop, NoActiveMaps,
                            NonPositiveDepth, NonFiniteGradient):
                        pass
                if on_frame is not None:
                    on_frame(epoch, fi, cert, params)
        reports.append(EpochReport(
            epoch=epoch, certified_count=certified, total_count=total,
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            epsilon=cert_cfg.epsilon,
            wall_time_s=time.monotonic() - t0))
        if config.use_best_epoch and certified > best[0]:
            best = (certified, params.copy())
        cert_cfg = anneal(cert_cfg)

    if config.use_best_epoch and best[1] is not None:
        params = best[1]
    results = infer(frames, params, landmarks, intrinsics,
                    temperature=config.temperature, seed=config.seed)
    return params, reports, results
