"""Robust pose-from-correspondences and implicit differentiation through it.

The forward path is weighted reprojection least squares refined with
Levenberg-Marquardt inside a RANSAC loop.  The backward path differentiates
the argmin map at the optimum via the implicit function theorem, giving the
Jacobian of the 6-DoF pose parameters with respect to every 2D point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateConfiguration, NoConsensus, NotAtOptimum,
                     SingularHessian, TooFewPoints)
from .geometry import (CameraIntrinsics, Pose, axis_angle_to_rotation,
                       project_points, skew)

MIN_POINTS = 4
COND_LIMIT = 1e12

# Levenberg-Marquardt schedule (lambda init, growth on rejection, shrink on
# acceptance) and convergence thresholds.
LM_LAMBDA0 = 1e-3
LM_GROW = 10.0
LM_SHRINK = 0.1
LM_MAX_ITERS = 100
LM_GRAD_TOL = 1e-8
LM_STEP_TOL = 1e-10


@dataclass(frozen=True)
class Correspondence:
    landmark_3d: np.ndarray
    point_2d: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "landmark_3d",
                           np.asarray(self.landmark_3d, dtype=float).reshape(3))
        object.__setattr__(self, "point_2d",
                           np.asarray(self.point_2d, dtype=float).reshape(2))
        if self.weight < 0 or not np.isfinite(self.weight):
            raise ValueError("weight must be finite and >= 0")
        if not (np.all(np.isfinite(self.landmark_3d))
                and np.all(np.isfinite(self.point_2d))):
            raise ValueError("correspondence coordinates must be finite")


@dataclass
class PnpSolution:
    pose: Pose
    inlier_mask: np.ndarray
    final_residual: float
    converged: bool
    iterations: int = 0


def _unpack(correspondences):
    pts3 = np.array([c.landmark_3d for c in correspondences])
    pts2 = np.array([c.point_2d for c in correspondences])
    w = np.array([c.weight for c in correspondences])
    return pts3, pts2, w


def _residuals(pts3, pts2, intrinsics, pose):
    cam = pts3 @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    bad = z <= 1e-9
    if np.any(bad):
        # Penalize behind-camera points heavily rather than aborting: RANSAC
        # minimal solves must survive wild intermediate poses.
        z = np.where(bad, 1e-9, z)
    u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    r = np.column_stack([u, v]) - pts2
    if np.any(bad):
        r[bad] += 1e6
    return r, cam


def _projection_jacobians(cam, translation, intrinsics):
    """Per-point 2x6 Jacobian of projection w.r.t. (axis-angle, translation).

    Local chart: R(w) = exp([w]x) R0, t(dt) = t0 + dt, evaluated at 0.
    cam(w) = exp([w]x) (R0 X) + t0 + dt, so d(cam)/dw = -[R0 X]x = -[cam-t0]x
    and d(cam)/dt = I.
    """
    n = cam.shape[0]
    jac = np.empty((n, 2, 6))
    rotated = cam - translation
    x, y, z = cam[:, 0], cam[:, 1], np.maximum(cam[:, 2], 1e-9)
    # d(u,v)/d(cam point)
    dpdc = np.zeros((n, 2, 3))
    dpdc[:, 0, 0] = intrinsics.fx / z
    dpdc[:, 0, 2] = -intrinsics.fx * x / z ** 2
    dpdc[:, 1, 1] = intrinsics.fy / z
    dpdc[:, 1, 2] = -intrinsics.fy * y / z ** 2
    for i in range(n):
        dcdw = -skew(rotated[i])
        jac[i, :, :3] = dpdc[i] @ dcdw
        jac[i, :, 3:] = dpdc[i]
    return jac


def _objective(r, w):
    return float(np.sum(w[:, None] * r ** 2))


def _objective_gradient(r, w, jac):
    # grad E = 2 sum_i w_i J_i^T r_i
    return 2.0 * np.einsum("i,icp,ic->p", w, jac, r)


def dlt_pose(pts3, pts2, intrinsics: CameraIntrinsics) -> Pose:
    """Direct linear transform on normalized coordinates, projected onto SO(3).

    Needs >= 6 points for a determined system; with fewer the min-norm
    solution is meaningless, so callers must supply an initial pose instead.
    """
    n = pts3.shape[0]
    if n < 6:
        raise DegenerateConfiguration("DLT needs >= 6 points")
    xn = (pts2[:, 0] - intrinsics.cx) / intrinsics.fx
    yn = (pts2[:, 1] - intrinsics.cy) / intrinsics.fy
    a = np.zeros((2 * n, 12))
    hom = np.column_stack([pts3, np.ones(n)])
    a[0::2, 0:4] = hom
    a[0::2, 8:12] = -xn[:, None] * hom
    a[1::2, 4:8] = hom
    a[1::2, 8:12] = -yn[:, None] * hom
    _, s, vt = np.linalg.svd(a)
    if s[0] / max(s[-2], 1e-300) > COND_LIMIT:
        raise DegenerateConfiguration("DLT system rank-deficient")
    p = vt[-1].reshape(3, 4)
    r_raw = p[:, :3]
    # Fix the projective sign so depths come out positive.
    depths = hom @ p[2]
    if np.sum(depths) < 0:
        p = -p
        r_raw = p[:, :3]
    u, sv, vt2 = np.linalg.svd(r_raw)
    d = np.linalg.det(u @ vt2)
    rot = u @ np.diag([1.0, 1.0, d]) @ vt2
    scale = np.mean(sv)
    if scale <= 0:
        raise DegenerateConfiguration("DLT produced zero-scale rotation block")
    t = p[:, 3] / scale
    return Pose(rot, t, check=False)


def solve_pnp(correspondences, intrinsics: CameraIntrinsics,
              initial: Pose | None = None,
              max_iters: int = LM_MAX_ITERS) -> PnpSolution:
    """Minimize the weighted reprojection objective with Levenberg-Marquardt.

    Raises TooFewPoints for < 4 positive-weight correspondences and
    DegenerateConfiguration when the normal matrix is irrecoverably singular.
    """
    pts3, pts2, w = _unpack(correspondences)
    active = w > 0
    if int(np.sum(active)) < MIN_POINTS:
        raise TooFewPoints(
            f"{int(np.sum(active))} positive-weight correspondences, need >= 4")
    if initial is None:
        if int(np.sum(active)) < 6:
            raise DegenerateConfiguration(
                "self-initialization (DLT) needs >= 6 points; pass `initial`")
        pose = dlt_pose(pts3[active], pts2[active], intrinsics)
    else:
        pose = Pose(initial.rotation.copy(), initial.translation.copy(),
                    check=False)

    lam = LM_LAMBDA0
    r, cam = _residuals(pts3, pts2, intrinsics, pose)
    cost = _objective(r, w)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        jac = _projection_jacobians(cam, pose.translation, intrinsics)
        grad = _objective_gradient(r, w, jac)
        if np.linalg.norm(grad) < LM_GRAD_TOL:
            converged = True
            break
        jw = jac * np.sqrt(w)[:, None, None]
        jflat = jw.reshape(-1, 6)
        h = jflat.T @ jflat
        g = 0.5 * grad  # J^T W r
        accepted = False
        for _ in range(12):
            haug = h + lam * np.eye(6)
            cond = np.linalg.cond(haug)
            if not np.isfinite(cond) or cond > COND_LIMIT:
                lam *= LM_GROW
                continue
            step = np.linalg.solve(haug, -g)
            trial = Pose(axis_angle_to_rotation(step[:3]) @ pose.rotation,
                         pose.translation + step[3:], check=False)
            r_new, cam_new = _residuals(pts3, pts2, intrinsics, trial)
            cost_new = _objective(r_new, w)
            if cost_new < cost:
                pose, r, cam, cost = trial, r_new, cam_new, cost_new
                lam = max(lam * LM_SHRINK, 1e-12)
                accepted = True
                break
            lam *= LM_GROW
        if not accepted:
            if it == 1 and np.linalg.cond(h) > COND_LIMIT:
                raise DegenerateConfiguration(
                    "normal matrix condition exceeds 1e12")
            break
        if np.linalg.norm(step) < LM_STEP_TOL:
            converged = True
            break
    # Re-orthonormalize after the chain of incremental rotations.
    u, _, vt = np.linalg.svd(pose.rotation)
    pose = Pose(u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt,
                pose.translation, check=False)
    r, _ = _residuals(pts3, pts2, intrinsics, pose)
    wsum = float(np.sum(w))
    rms = float(np.sqrt(np.sum(w[:, None] * r ** 2) / max(wsum, 1e-300)))
    return PnpSolution(pose=pose, inlier_mask=active.copy(),
                       final_residual=rms, converged=converged, iterations=it)


def ransac_pnp(correspondences, intrinsics: CameraIntrinsics,
               inlier_threshold_px: float = 5.0, max_iters: int = 500,
               seed: int = 0, confidence: float = 0.999) -> PnpSolution:
    """RANSAC over minimal 4-subsets with LM refinement on the consensus set.

    Deterministic given `seed`: the sample sequence is pre-generated before
    any scoring happens.  Minimal solves are LM refinements initialized from
    a DLT over all correspondences (falling back to a canonical frontal pose
    when DLT is unavailable or degenerate).
    """
    pts3, pts2, w = _unpack(correspondences)
    n = pts3.shape[0]
    if n < MIN_POINTS:
        raise TooFewPoints(f"{n} correspondences, need >= 4")

    rng = np.random.default_rng(seed)
    samples = [rng.choice(n, size=MIN_POINTS, replace=False)
               for _ in range(max_iters)]

    try:
        init = dlt_pose(pts3, pts2, intrinsics) if n >= 6 else None
    except DegenerateConfiguration:
        init = None
    if init is None:
        init = Pose(np.eye(3), np.array([0.0, 0.0, 1.0]), check=False)

    best_count = -1
    best_err = np.inf
    best_mask = None
    best_pose = init
    for trial_idx, idx in enumerate(samples, start=1):
        sub = [correspondences[i] for i in idx]
        try:
            sol = solve_pnp(sub, intrinsics, initial=init, max_iters=25)
        except (TooFewPoints, DegenerateConfiguration):
            continue
        r, _ = _residuals(pts3, pts2, intrinsics, sol.pose)
        dist = np.linalg.norm(r, axis=1)
        mask = dist < inlier_threshold_px
        count = int(np.sum(mask))
        err = float(np.sum(dist[mask])) if count else np.inf
        if count > best_count or (count == best_count and err < best_err):
            best_count, best_err, best_mask = count, err, mask
            best_pose = sol.pose
        # Adaptive early exit: stop once enough all-inlier samples should
        # have been seen at the requested confidence.
        if best_count >= MIN_POINTS:
            p_all = (best_count / n) ** MIN_POINTS
            if p_all >= 1.0 - 1e-12:
                break
            needed = np.log(1.0 - confidence) / np.log(1.0 - p_all)
            if trial_idx >= needed:
                break
    if best_mask is None or best_count < MIN_POINTS:
        raise NoConsensus(
            f"best inlier set has {max(best_count, 0)} points, need >= 4")

    consensus = [Correspondence(pts3[i], pts2[i], w[i])
                 for i in range(n) if best_mask[i]]
    refined = solve_pnp(consensus, intrinsics, initial=best_pose)
    # Re-score every correspondence against the refined pose.
    r, _ = _residuals(pts3, pts2, intrinsics, refined.pose)
    dist = np.linalg.norm(r, axis=1)
    mask = dist < inlier_threshold_px
    if int(np.sum(mask)) < MIN_POINTS:
        mask = best_mask
    inl = dist[mask]
    rms = float(np.sqrt(np.mean(inl ** 2))) if inl.size else np.inf
    return PnpSolution(pose=refined.pose, inlier_mask=mask,
                       final_residual=rms, converged=refined.converged,
                       iterations=refined.iterations)


def _hessian_fd(pts3, pts2, w, intrinsics, pose, step=1e-6):
    """Hessian of the objective over the local chart, by central differences
    of the analytic gradient (exact to O(step^2))."""
    h = np.empty((6, 6))
    for k in range(6):
        for sgn, out in ((1.0, 0), (-1.0, 1)):
            delta = np.zeros(6)
            delta[k] = sgn * step
            p = Pose(axis_angle_to_rotation(delta[:3]) @ pose.rotation,
                     pose.translation + delta[3:], check=False)
            r, cam = _residuals(pts3, pts2, intrinsics, p)
            jac = _projection_jacobians(cam, p.translation, intrinsics)
            g = _objective_gradient(r, w, jac)
            if out == 0:
                gp = g
            else:
                gm = g
        h[:, k] = (gp - gm) / (2.0 * step)
    return 0.5 * (h + h.T)


def pnp_gradient(solution: PnpSolution, correspondences,
                 intrinsics: CameraIntrinsics) -> np.ndarray:
    """Implicit-function-theorem Jacobian of the pose w.r.t. each 2D point.

    Returns an (n, 6, 2) array: d(theta)/d(u_i) where theta is the
    (axis-angle, translation) chart anchored at the solved pose.  Entries for
    zero-weight or outlier correspondences are exactly zero.
    """
    if not solution.converged:
        raise NotAtOptimum("forward solve did not converge")
    pts3, pts2, w = _unpack(correspondences)
    w_eff = np.where(solution.inlier_mask, w, 0.0)
    r, cam = _residuals(pts3, pts2, intrinsics, solution.pose)
    jac = _projection_jacobians(cam, solution.pose.translation, intrinsics)
    grad = _objective_gradient(r, w_eff, jac)
    if np.linalg.norm(grad) >= 1e-6:
        raise NotAtOptimum(
            f"objective gradient norm {np.linalg.norm(grad):.3e} >= 1e-6")
    h = _hessian_fd(pts3, pts2, w_eff, intrinsics, solution.pose)
    cond = np.linalg.cond(h)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularHessian(f"Hessian condition {cond:.3e} exceeds 1e12")
    hinv = np.linalg.inv(h)
    n = pts3.shape[0]
    out = np.zeros((n, 6, 2))
    for i in range(n):
        if w_eff[i] == 0.0:
            continue
        # d(grad)/d(u_i) = -2 w_i J_i^T  =>  d(theta)/d(u_i) = 2 w_i H^-1 J_i^T
        out[i] = 2.0 * w_eff[i] * (hinv @ jac[i].T)
    return out


def apply_pose_delta(pose: Pose, delta) -> Pose:
    """Move a pose along the local chart used by pnp_gradient."""
    d = np.asarray(delta, dtype=float).reshape(6)
    return Pose(axis_angle_to_rotation(d[:3]) @ pose.rotation,
                pose.translation + d[3:], check=False)
