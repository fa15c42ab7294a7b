import numpy as np
import pytest

from certipose import geometry as geo
from certipose import pnp
from certipose.errors import NoConsensus, NotAtOptimum, TooFewPoints
from certipose.geometry import Pose, axis_angle_to_rotation, project_points
from certipose.pnp import Correspondence, pnp_gradient, ransac_pnp, solve_pnp

from conftest import random_pose


def make_landmarks(rng, n=14):
    pts = rng.uniform(-0.15, 0.15, size=(n, 3))
    pts[:, 2] *= 0.5
    return pts


def make_problem(rng, n=14, noise=0.0):
    pose = random_pose(rng, max_angle=0.8)
    pts3 = make_landmarks(rng, n)
    intr = geo.CameraIntrinsics(600, 600, 128, 128, 256, 256)
    uv = project_points(pts3, intr, pose)
    if noise:
        uv = uv + rng.normal(scale=noise, size=uv.shape)
    corr = [Correspondence(p, u) for p, u in zip(pts3, uv)]
    return pose, pts3, uv, corr, intr


def perturb(pose, rng, angle_deg=5.0, trans=0.05):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    r = axis_angle_to_rotation(axis * np.deg2rad(angle_deg)) @ pose.rotation
    return Pose(r, pose.translation + rng.normal(scale=trans / np.sqrt(3), size=3),
                check=False)


def rot_error(a, b):
    c = (np.trace(a.rotation.T @ b.rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


class TestSolvePnp:
    def test_recovers_truth_from_perturbed_init(self, rng):
        for _ in range(5):
            pose, _, _, corr, intr = make_problem(rng)
            sol = solve_pnp(corr, intr, initial=perturb(pose, rng))
            assert sol.converged
            assert rot_error(sol.pose, pose) < 1e-6
            assert np.linalg.norm(sol.pose.translation - pose.translation) < 1e-8

    def test_fixed_point_at_optimum(self, rng):
        pose, _, _, corr, intr = make_problem(rng)
        sol = solve_pnp(corr, intr, initial=pose)
        assert sol.final_residual < 1e-10

    def test_self_initialization_dlt(self, rng):
        pose, _, _, corr, intr = make_problem(rng)
        sol = solve_pnp(corr, intr)
        assert sol.converged
        assert rot_error(sol.pose, pose) < 1e-6

    def test_too_few_points(self, rng):
        _, pts3, uv, _, intr = make_problem(rng)
        corr = [Correspondence(pts3[i], uv[i]) for i in range(3)]
        with pytest.raises(TooFewPoints):
            solve_pnp(corr, intr)

    def test_noise_floor_monte_carlo(self, rng):
        # sigma=1 px noise on 14 points at ~1 m depth: recovered residual RMS
        # should sit in [0.5, 1.5] * sigma on average over 100 trials.
        sigma = 1.0
        vals = []
        for _ in range(100):
            pose, _, _, corr, intr = make_problem(rng, noise=sigma)
            sol = solve_pnp(corr, intr, initial=pose)
            vals.append(sol.final_residual)
        mean_rms = float(np.mean(vals))
        assert 0.5 * sigma <= mean_rms <= 1.5 * sigma

    def test_rigid_consistency(self, rng):
        # Rotating the 3D landmarks and the pose by the same rigid transform
        # leaves the reported residual unchanged.
        pose, pts3, uv, corr, intr = make_problem(rng, noise=0.5)
        g = random_pose(rng, max_angle=0.5)
        pts3b = geo.invert(g).apply(pts3)
        poseb = geo.compose(pose, g)
        corrb = [Correspondence(p, u) for p, u in zip(pts3b, uv)]
        sa = solve_pnp(corr, intr, initial=pose)
        sb = solve_pnp(corrb, intr, initial=poseb)
        assert abs(sa.final_residual - sb.final_residual) < 1e-9


class TestRansacPnp:
    def test_clean_data_all_inliers(self, rng):
        pose, _, _, corr, intr = make_problem(rng)
        sol = ransac_pnp(corr, intr, inlier_threshold_px=5.0, seed=7)
        assert sol.inlier_mask.all()
        assert rot_error(sol.pose, pose) < 1e-6

    def test_planted_outliers_excluded(self, rng):
        pose, pts3, uv, _, intr = make_problem(rng)
        uv = uv.copy()
        bad = [1, 5, 9, 12]
        for i in bad:
            uv[i] += 100.0
        corr = [Correspondence(p, u) for p, u in zip(pts3, uv)]
        sol = ransac_pnp(corr, intr, inlier_threshold_px=5.0, seed=3)
        for i in bad:
            assert not sol.inlier_mask[i]
        assert int(sol.inlier_mask.sum()) == 10
        assert rot_error(sol.pose, pose) < 1e-5

    def test_below_minimal_set(self, rng):
        _, pts3, uv, _, intr = make_problem(rng)
        corr = [Correspondence(pts3[i], uv[i]) for i in range(3)]
        with pytest.raises(TooFewPoints):
            ransac_pnp(corr, intr)

    def test_no_consensus_on_garbage(self, rng, intrinsics):
        pts3 = make_landmarks(rng, 8)
        uv = rng.uniform(0, 256, size=(8, 2))
        corr = [Correspondence(p, u) for p, u in zip(pts3, uv)]
        with pytest.raises(NoConsensus):
            ransac_pnp(corr, intrinsics, inlier_threshold_px=0.005, seed=1,
                       max_iters=30)

    def test_seeded_reproducibility(self, rng):
        pose, pts3, uv, _, intr = make_problem(rng, noise=1.0)
        corr = [Correspondence(p, u) for p, u in zip(pts3, uv)]
        a = ransac_pnp(corr, intr, seed=42)
        b = ransac_pnp(corr, intr, seed=42)
        assert np.array_equal(a.pose.rotation, b.pose.rotation)
        assert np.array_equal(a.pose.translation, b.pose.translation)
        assert np.array_equal(a.inlier_mask, b.inlier_mask)
        assert a.final_residual == b.final_residual


def fd_jacobian(corr, intr, base_sol, i, step=1e-4):
    """Central finite differences of the argmin map w.r.t. point i."""
    out = np.zeros((6, 2))
    for c in range(2):
        sols = []
        for sgn in (+1.0, -1.0):
            pts2 = np.array([cc.point_2d for cc in corr])
            pts2[i, c] += sgn * step
            mod = [Correspondence(cc.landmark_3d, u, cc.weight)
                   for cc, u in zip(corr, pts2)]
            sol = solve_pnp(mod, intr, initial=base_sol.pose)
            sols.append(sol.pose)
        # chart coordinates of each solution relative to the base pose
        dr_p = sols[0].rotation @ base_sol.pose.rotation.T
        dr_m = sols[1].rotation @ base_sol.pose.rotation.T
        w_p = rotmat_to_axis_angle(dr_p)
        w_m = rotmat_to_axis_angle(dr_m)
        dt_p = sols[0].translation - base_sol.pose.translation
        dt_m = sols[1].translation - base_sol.pose.translation
        out[:3, c] = (w_p - w_m) / (2 * step)
        out[3:, c] = (dt_p - dt_m) / (2 * step)
    return out


def rotmat_to_axis_angle(r):
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(c)
    if theta < 1e-12:
        return np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0],
                         r[1, 0] - r[0, 1]]) / 2.0
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0],
                     r[1, 0] - r[0, 1]]) / (2.0 * np.sin(theta))
    return axis * theta


class TestPnpGradient:
    def test_matches_finite_differences(self, rng):
        pose, _, _, corr, intr = make_problem(rng)
        sol = solve_pnp(corr, intr, initial=pose)
        jac = pnp_gradient(sol, corr, intr)
        for i in (0, 4, 9):
            fd = fd_jacobian(corr, intr, sol, i)
            sig = np.abs(fd) > 1e-6
            rel = np.abs(jac[i] - fd)[sig] / np.abs(fd)[sig]
            assert rel.max() < 1e-3

    def test_zero_weight_gives_zero_block(self, rng):
        pose, pts3, uv, _, intr = make_problem(rng)
        corr = [Correspondence(p, u, weight=0.0 if i == 3 else 1.0)
                for i, (p, u) in enumerate(zip(pts3, uv))]
        sol = solve_pnp(corr, intr, initial=pose)
        jac = pnp_gradient(sol, corr, intr)
        assert np.array_equal(jac[3], np.zeros((6, 2)))

    def test_weight_linearity_on_duplicates(self, rng):
        pose, pts3, uv, _, intr = make_problem(rng)
        corr = [Correspondence(p, u) for p, u in zip(pts3, uv)]
        dup = corr + [Correspondence(pts3[0], uv[0])]
        dup[0] = Correspondence(pts3[0], uv[0], weight=0.5)
        dup[-1] = Correspondence(pts3[0], uv[0], weight=0.5)
        sol1 = solve_pnp(corr, intr, initial=pose)
        sol2 = solve_pnp(dup, intr, initial=pose)
        j1 = pnp_gradient(sol1, corr, intr)
        j2 = pnp_gradient(sol2, dup, intr)
        assert np.abs((j2[0] + j2[-1]) - j1[0]).max() < 1e-9

    def test_not_at_optimum_raises(self, rng):
        pose, _, _, corr, intr = make_problem(rng)
        sol = solve_pnp(corr, intr, initial=pose)
        bad = pnp.PnpSolution(pose=perturb(pose, rng), converged=True,
                              inlier_mask=sol.inlier_mask,
                              final_residual=sol.final_residual)
        with pytest.raises(NotAtOptimum):
            pnp_gradient(bad, corr, intr)

    def test_property_fd_match_on_random_instances(self, rng):
        # 20 random instances, one random point each.
        for _ in range(20):
            pose, _, _, corr, intr = make_problem(rng)
            sol = solve_pnp(corr, intr, initial=pose)
            jac = pnp_gradient(sol, corr, intr)
            i = int(rng.integers(0, len(corr)))
            fd = fd_jacobian(corr, intr, sol, i)
            sig = np.abs(fd) > 1e-6
            rel = np.abs(jac[i] - fd)[sig] / np.abs(fd)[sig]
            assert rel.max() < 1e-3
