import numpy as np
import pytest

from certipose.certifier import CertifierConfig
from certipose.events import EventFrame
from certipose.geometry import (CadModel, LandmarkSet, Pose, project_points,
                                rotation_to_quaternion)
from certipose.evaluation import rotation_error
from certipose.regressor import Landmarks2D, init_params
from certipose.selfsup import (EpochReport, SelfSupConfig, infer,
                               learning_rate_at_epoch, run_self_supervision)

from conftest import random_pose


def frame_from_projection(uv, width, height):
    px = np.zeros((height, width))
    for x, y in np.round(uv).astype(int):
        if 0 <= x < width and 0 <= y < height:
            px[y, x] = 1.0
    return EventFrame(pixels=px, t_start=0, t_end=50000, max_count=1)


def empty_frame(width, height):
    return EventFrame(pixels=np.zeros((height, width)), t_start=0,
                      t_end=50000, max_count=0)


@pytest.fixture
def scene(rng, intrinsics):
    model = CadModel(rng.uniform(-0.12, 0.12, size=(400, 3)))
    landmarks = LandmarkSet(np.array([
        [0.12, 0.12, 0.0], [-0.12, 0.12, 0.02], [-0.12, -0.12, 0.0],
        [0.12, -0.12, 0.03], [0.0, 0.0, 0.12], [0.05, -0.02, -0.1]]))
    poses = [random_pose(rng, max_angle=0.3, depth=(1.0, 1.4))
             for _ in range(4)]
    frames = [frame_from_projection(
        project_points(model.points, intrinsics, p),
        intrinsics.width, intrinsics.height) for p in poses]
    return model, landmarks, poses, frames


class TestConfig:
    def test_defaults(self):
        cfg = SelfSupConfig()
        assert cfg.epochs == 20
        assert cfg.batch_size == 32
        assert cfg.learning_rate == pytest.approx(1e-3)
        assert cfg.lr_drop_epoch == 15
        assert cfg.tau == pytest.approx(0.05)
        assert cfg.certifier.epsilon == 100.0

    def test_validation(self):
        with pytest.raises(ValueError):
            SelfSupConfig(epochs=0)
        with pytest.raises(ValueError):
            SelfSupConfig(batch_size=0)
        with pytest.raises(ValueError):
            SelfSupConfig(tau=0.0)

    def test_lr_schedule(self):
        cfg = SelfSupConfig()
        for e in range(1, 15):
            assert learning_rate_at_epoch(cfg, e) == pytest.approx(1e-3)
        for e in range(15, 21):
            assert learning_rate_at_epoch(cfg, e) == pytest.approx(1e-4)


class TestInfer:
    def test_oracle_predictions_recover_pose(self, scene, intrinsics):
        model, landmarks, poses, frames = scene

        def oracle(k):
            def predict(frame, box):
                uv = project_points(landmarks.landmarks, intrinsics,
                                    poses[k])
                return Landmarks2D(points=uv,
                                   confidences=np.ones(len(landmarks)))
            return predict

        params = init_params(num_landmarks=len(landmarks), seed=0)
        for k in range(len(frames)):
            res = infer([frames[k]], params, landmarks, intrinsics,
                        predict=oracle(k))[0]
            assert res.pose is not None
            psi = rotation_error(
                rotation_to_quaternion(poses[k].rotation),
                rotation_to_quaternion(res.pose.rotation))
            assert psi < 1e-6
            assert np.linalg.norm(res.pose.translation
                                  - poses[k].translation) < 1e-6

    def test_empty_frame_absent_marker(self, intrinsics, scene):
        model, landmarks, poses, frames = scene
        params = init_params(num_landmarks=len(landmarks), seed=0)
        res = infer([empty_frame(intrinsics.width, intrinsics.height)],
                    params, landmarks, intrinsics)[0]
        assert res.pose is None
        assert res.reason == "empty-frame"

    def test_deterministic(self, scene, intrinsics):
        model, landmarks, poses, frames = scene
        params = init_params(num_landmarks=len(landmarks), seed=3)
        a = infer(frames, params, landmarks, intrinsics, seed=5)
        b = infer(frames, params, landmarks, intrinsics, seed=5)
        for ra, rb in zip(a, b):
            assert (ra.pose is None) == (rb.pose is None)
            if ra.pose is not None:
                assert ra.pose.matrix().tobytes() == rb.pose.matrix().tobytes()


class TestRunSelfSupervision:
    def test_noop_when_lr_zero(self, scene, intrinsics):
        model, landmarks, poses, frames = scene
        params = init_params(num_landmarks=len(landmarks), seed=1)
        before = params.fingerprint()
        cfg = SelfSupConfig(epochs=1, learning_rate=0.0, batch_size=2,
                            certifier=CertifierConfig(epsilon=1e6), seed=7)
        adapted, reports, results = run_self_supervision(
            frames, params, model, landmarks, intrinsics, cfg)
        assert adapted.fingerprint() == before
        plain = infer(frames, adapted, landmarks, intrinsics, seed=7)
        for ra, rb in zip(results, plain):
            assert (ra.pose is None) == (rb.pose is None)
            if ra.pose is not None:
                assert ra.pose.matrix().tobytes() == rb.pose.matrix().tobytes()

    def test_epsilon_sequence(self, scene, intrinsics):
        model, landmarks, poses, frames = scene
        params = init_params(num_landmarks=len(landmarks), seed=1)
        cfg = SelfSupConfig(epochs=20, learning_rate=0.0, batch_size=2,
                            seed=7)
        _, reports, _ = run_self_supervision(
            frames[:2], params, model, landmarks, intrinsics, cfg)
        assert len(reports) == 20
        for e, rep in enumerate(reports):
            want = 100.0 * 0.975 ** e
            assert rep.epsilon == pytest.approx(want, rel=1e-12)

    def test_gating_only_certified_frames_update(self, scene, intrinsics):
        # permissive epsilon: every solved pose certifies; empty frames
        # never reach certification and must never change the parameters
        model, landmarks, poses, frames = scene
        mixed = [frames[0],
                 empty_frame(intrinsics.width, intrinsics.height),
                 frames[1],
                 empty_frame(intrinsics.width, intrinsics.height)]
        params = init_params(num_landmarks=len(landmarks), seed=1)
        cfg = SelfSupConfig(epochs=2, learning_rate=1e-3, batch_size=4,
                            certifier=CertifierConfig(epsilon=1e9, beta=1.0),
                            seed=7, use_pose_path=False)
        log = []

        def on_frame(epoch, fi, cert, p):
            log.append((epoch, fi, cert is not None and cert.passed,
                        p.fingerprint()))

        before = params.fingerprint()
        run_self_supervision(mixed, params, model, landmarks, intrinsics,
                             cfg, on_frame=on_frame)
        assert len(log) == 8
        prev = before
        saw_update = False
        for epoch, fi, certified, fp in log:
            if not certified:
                assert fp == prev
            elif fp != prev:
                saw_update = True
            prev = fp
        assert saw_update

    def test_tight_epsilon_never_updates(self, scene, intrinsics):
        model, landmarks, poses, frames = scene
        params = init_params(num_landmarks=len(landmarks), seed=1)
        before = params.fingerprint()
        cfg = SelfSupConfig(epochs=2, learning_rate=1e-3, batch_size=2,
                            certifier=CertifierConfig(epsilon=1e-6),
                            seed=7)
        adapted, reports, _ = run_self_supervision(
            frames, params, model, landmarks, intrinsics, cfg)
        assert adapted.fingerprint() == before
        assert all(r.certified_count == 0 for r in reports)

    def test_reports_reproducible(self, scene, intrinsics):
        model, landmarks, poses, frames = scene
        params = init_params(num_landmarks=len(landmarks), seed=1)
        cfg = SelfSupConfig(epochs=3, learning_rate=1e-3, batch_size=2,
                            certifier=CertifierConfig(epsilon=1e9, beta=1.0),
                            seed=11, use_pose_path=False)
        runs = []
        for _ in range(2):
            p = params.copy()
            adapted, reports, _ = run_self_supervision(
                frames, p, model, landmarks, intrinsics, cfg)
            runs.append((adapted.fingerprint(),
                         [(r.certified_count, r.total_count, r.epsilon)
                          for r in reports]))
        assert runs[0] == runs[1]

    def test_empty_frames_list_raises(self, scene, intrinsics):
        model, landmarks, _, _ = scene
        with pytest.raises(ValueError):
            run_self_supervision([], init_params(6, 0), model, landmarks,
                                 intrinsics, SelfSupConfig())

    def test_report_invariant(self):
        with pytest.raises(ValueError):
            EpochReport(epoch=1, certified_count=5, total_count=3,
                        mean_loss=0.0, epsilon=100.0, wall_time_s=0.0)
