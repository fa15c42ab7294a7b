"""Command-line surface, synthetic dataset generation and reporting.

Subcommands: gen | train | selftrain | infer | eval | report, each a pure
function of (config file, dataset files, seed) so re-runs are
byte-identical.  Configuration is flat ``section.key=value`` text; plots
are hand-emitted SVG polylines.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .certifier import CertifierConfig, certify
from .errors import CertiposeError, ConfigError, DataError
from .evaluation import aggregate, associate, pose_errors
from .events import (LightingModel, e2f, load_events_binary,
                     save_events_binary, save_frame_pgm)
from .geometry import (CadModel, CameraIntrinsics, LandmarkSet, Pose,
                       axis_angle_to_rotation, pose_from_record,
                       pose_to_record)
from .regressor import (OfflineTrainConfig, init_params, load_checkpoint,
                        offline_train, save_checkpoint)
from .selfsup import SelfSupConfig, infer, run_self_supervision

# ---------------------------------------------------------------------------
# procedural satellite model


def build_satellite(step: float = 0.01):
    """Deterministic asymmetric satellite point cloud plus 14 landmarks.

    Box body with two unequal solar panels, an antenna dish and a boom;
    the asymmetry gives each landmark distinctive local geometry, which
    the small-receptive-field regressor needs to tell landmarks apart.
    `step` is the surface sampling pitch in meters.  Pick it so several
    points land on each camera pixel: with sparser sampling the z-buffer
    splat leaves coverage holes that flicker between poses and flood the
    event stream with aliasing noise.
    """
    def grid(a0, a1, b0, b1):
        na = max(2, int(round((a1 - a0) / step)) + 1)
        nb = max(2, int(round((b1 - b0) / step)) + 1)
        return np.meshgrid(np.linspace(a0, a1, na), np.linspace(b0, b1, nb))

    pts = []
    bx, by, bz = 0.13, 0.125, 0.05       # body half-extents

    # body faces
    xx, yy = grid(-bx, bx, -by, by)
    for z in (-bz, bz):
        pts.append(np.column_stack([xx.ravel(), yy.ravel(),
                                    np.full(xx.size, z)]))
    xx, zz = grid(-bx, bx, -bz, bz)
    for y in (-by, by):
        pts.append(np.column_stack([xx.ravel(), np.full(xx.size, y),
                                    zz.ravel()]))
    yy, zz = grid(-by, by, -bz, bz)
    for x in (-bx, bx):
        pts.append(np.column_stack([np.full(yy.size, x), yy.ravel(),
                                    zz.ravel()]))

    # long panel on +x, short panel on -x (unequal on purpose)
    xx, yy = grid(bx + 0.02, bx + 0.32, -0.09, 0.09)
    pts.append(np.column_stack([xx.ravel(), yy.ravel(),
                                np.full(xx.size, 0.01)]))
    xx, yy = grid(-bx - 0.22, -bx - 0.02, -0.06, 0.06)
    pts.append(np.column_stack([xx.ravel(), yy.ravel(),
                                np.full(xx.size, -0.01)]))

    # antenna dish: ring on the +z face near a corner
    ang = np.linspace(0.0, 2 * np.pi, 40, endpoint=False)
    for r in (0.02, 0.035):
        pts.append(np.column_stack([0.07 + r * np.cos(ang),
                                    0.07 + r * np.sin(ang),
                                    np.full(ang.size, bz + 0.02)]))
    # antenna mast
    zs = np.linspace(bz, bz + 0.05, 6)
    pts.append(np.column_stack([np.full(zs.size, 0.07),
                                np.full(zs.size, 0.07), zs]))

    # boom along -y with a tip mass
    ys = np.linspace(-by, -by - 0.15, 16)
    pts.append(np.column_stack([np.full(ys.size, -0.05), ys,
                                np.zeros(ys.size)]))

    model = CadModel(np.vstack(pts))
    landmarks = LandmarkSet(np.array([
        [bx, by, bz], [-bx, by, bz], [-bx, -by, bz], [bx, -by, bz],
        [bx, by, -bz], [-bx, by, -bz], [-bx, -by, -bz], [bx, -by, -bz],
        [bx + 0.32, 0.09, 0.01], [bx + 0.32, -0.09, 0.01],
        [-bx - 0.22, 0.06, -0.01], [-bx - 0.22, -0.06, -0.01],
        [0.07, 0.07, bz + 0.05],               # antenna tip
        [-0.05, -by - 0.15, 0.0],              # boom tip
    ]))
    return model, landmarks


# ---------------------------------------------------------------------------
# trajectories

STEP_DEG = 1.0


def _rotation_steps(n_steps: int, rng) -> list:
    """Per-step rotation deltas: exactly 1 degree on 1 or 2 axes."""
    deltas = []
    for _ in range(n_steps):
        n_axes = int(rng.integers(1, 3))
        axes = rng.choice(3, size=n_axes, replace=False)
        ang = np.zeros(3)
        for a in axes:
            ang[a] = np.deg2rad(STEP_DEG) * (1 if rng.random() < 0.5 else -1)
        deltas.append(ang)
    return deltas


def _step_rotation(ang) -> np.ndarray:
    """Rz(az) @ Ry(ay) @ Rx(ax) from per-axis angles."""
    rx = axis_angle_to_rotation([ang[0], 0, 0])
    ry = axis_angle_to_rotation([0, ang[1], 0])
    rz = axis_angle_to_rotation([0, 0, ang[2]])
    return rz @ ry @ rx


def approach_trajectory(duration: float, pose_rate: float, seed: int,
                        start_dist: float = 1.8, end_dist: float = 0.9):
    """Linear approach with slow 1-degree-step tumbling; ||t|| strictly
    decreases along the sequence."""
    n = max(2, int(round(duration * pose_rate)) + 1)
    rng = np.random.default_rng(seed)
    deltas = _rotation_steps(n - 1, rng)
    rot = axis_angle_to_rotation([0.3, -0.2, 0.1])
    out = []
    for k in range(n):
        s = k / (n - 1)
        dist = start_dist + (end_dist - start_dist) * s
        out.append((k / pose_rate, Pose(rot, [0.02 * s, -0.01 * s, dist])))
        if k < n - 1:
            rot = _step_rotation(deltas[k]) @ rot
    return out


def orbit_trajectory(pose_rate: float, seed: int, radius: float = 1.0,
                     sweep_deg: float = 90.0):
    """Fly-by: fixed stand-off distance, attitude sweeping 1 degree per
    step about the vertical axis, with an occasional extra 1-degree
    wobble on a second axis (never more than 2 axes per step)."""
    n = max(2, int(round(sweep_deg)) + 1)
    rng = np.random.default_rng(seed)
    rot = axis_angle_to_rotation([0.2, 0.4, -0.1])
    step = np.deg2rad(STEP_DEG)
    out = []
    for k in range(n):
        out.append((k / pose_rate, Pose(rot, [0.0, 0.0, radius])))
        if k < n - 1:
            ang = np.array([0.0, step, 0.0])
            if rng.random() < 0.5:
                axis = 0 if rng.random() < 0.5 else 2
                ang[axis] = step * (1 if rng.random() < 0.5 else -1)
            rot = _step_rotation(ang) @ rot
    return out


# ---------------------------------------------------------------------------
# scenario spec

TRAJECTORIES = ("approach", "orbit")
SPEEDS = ("slow", "fast")
LIGHTINGS = ("neutral", "low", "harsh")

LIGHTING_PRESETS = {
    "neutral": LightingModel(contrast_threshold=0.15,
                             direction=(0.0, 0.0, -1.0)),
    "low": LightingModel(contrast_threshold=0.2,
                         direction=(0.3, 0.2, -0.9), ambient=0.04,
                         noise_rate=0.5),
    "harsh": LightingModel(contrast_threshold=0.15,
                           direction=(0.5, 0.3, -0.8), harshness=5.0,
                           noise_rate=2.0),
}

# batching window per scenario (seconds)
TAU_DEFAULTS = {("approach", "slow"): 0.05, ("approach", "fast"): 0.05,
                ("orbit", "slow"): 0.2, ("orbit", "fast"): 0.01}

# ground-truth pose rate per speed (poses/s; 1 degree per step for orbit)
POSE_RATES = {"slow": 5.0, "fast": 100.0}


@dataclass(frozen=True)
class ScenarioSpec:
    trajectory: str = "orbit"
    speed: str = "slow"
    lighting: str = "neutral"
    duration: float = 3.56             # approach only, seconds
    pose_rate: float | None = None     # default per speed
    radius: float = 1.0                # orbit stand-off, meters
    sweep_deg: float = 90.0            # orbit total sweep, degrees
    model_step: float = 0.01           # CAD surface sampling pitch, meters

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ConfigError(f"unknown trajectory {self.trajectory!r}")
        if self.speed not in SPEEDS:
            raise ConfigError(f"unknown speed {self.speed!r}")
        if self.lighting not in LIGHTINGS:
            raise ConfigError(f"unknown lighting {self.lighting!r}")
        if self.duration <= 0:
            raise ConfigError("duration must be > 0")
        if self.pose_rate is not None and self.pose_rate <= 0:
            raise ConfigError("pose_rate must be > 0")
        if self.sweep_deg <= 0:
            raise ConfigError("sweep_deg must be > 0")
        if self.radius <= 0:
            raise ConfigError("radius must be > 0")
        if self.model_step <= 0:
            raise ConfigError("model_step must be > 0")

    @property
    def effective_pose_rate(self) -> float:
        return self.pose_rate if self.pose_rate else POSE_RATES[self.speed]

    @property
    def tau(self) -> float:
        return TAU_DEFAULTS[(self.trajectory, self.speed)]

    @property
    def lighting_model(self) -> LightingModel:
        return LIGHTING_PRESETS[self.lighting]


def make_trajectory(spec: ScenarioSpec, seed: int):
    if spec.trajectory == "approach":
        return approach_trajectory(spec.duration, spec.effective_pose_rate,
                                   seed)
    return orbit_trajectory(spec.effective_pose_rate, seed,
                            radius=spec.radius, sweep_deg=spec.sweep_deg)


# ---------------------------------------------------------------------------
# flat key=value config


def parse_config_text(text: str) -> dict:
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {ln}: empty key")
        if key in out:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def serialize_config(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text)


def cfg_get(cfg: dict, key: str, cast, default=None):
    if key not in cfg:
        if default is not None:
            return default
        raise ConfigError(f"missing config key {key!r}")
    try:
        if cast is bool:
            v = cfg[key].lower()
            if v not in ("true", "false", "0", "1"):
                raise ValueError(v)
            return v in ("true", "1")
        return cast(cfg[key])
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: bad value {cfg[key]!r}") from e


# ---------------------------------------------------------------------------
# SVG line charts


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def write_line_chart(path, series: dict, title: str, xlabel: str,
                     ylabel: str, seed=None) -> None:
    """Minimal multi-series line chart: axes, ticks, one polyline per
    series, fixed 640x400 canvas.  `series` maps label -> (xs, ys)."""
    w, h = 640, 400
    ml, mr, mt, mb = 70, 20, 40, 50
    pw, ph = w - ml - mr, h - mt - mb
    all_x = [x for xs, _ in series.values() for x in xs]
    all_y = [y for _, ys in series.values() for y in ys
             if np.isfinite(y)]
    if not all_x or not all_y:
        raise DataError("nothing to plot")
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = min(all_y), max(all_y)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return ml + pw * (x - x0) / (x1 - x0)

    def py(y):
        return mt + ph * (1.0 - (y - y0) / (y1 - y0))

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" '
             f'height="{h}" viewBox="0 0 {w} {h}">']
    if seed is not None:
        parts.append(f"<!-- seed={seed} -->")
    parts.append(f'<rect width="{w}" height="{h}" fill="white"/>')
    parts.append(f'<text x="{w // 2}" y="24" text-anchor="middle" '
                 f'font-size="16">{title}</text>')
    # axes
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" '
                 'stroke="black"/>')
    parts.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" '
                 f'y2="{mt + ph}" stroke="black"/>')
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        xpx, ypx = px(xv), py(yv)
        parts.append(f'<line x1="{_fmt(xpx)}" y1="{mt + ph}" '
                     f'x2="{_fmt(xpx)}" y2="{mt + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{_fmt(xpx)}" y="{mt + ph + 20}" '
                     f'text-anchor="middle" font-size="11">{_fmt(xv)}</text>')
        parts.append(f'<line x1="{ml - 5}" y1="{_fmt(ypx)}" x2="{ml}" '
                     f'y2="{_fmt(ypx)}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{_fmt(ypx + 4)}" '
                     f'text-anchor="end" font-size="11">{_fmt(yv)}</text>')
    parts.append(f'<text x="{ml + pw // 2}" y="{h - 10}" '
                 f'text-anchor="middle" font-size="13">{xlabel}</text>')
    parts.append(f'<text x="18" y="{mt + ph // 2}" text-anchor="middle" '
                 f'font-size="13" transform="rotate(-90 18 '
                 f'{mt + ph // 2})">{ylabel}</text>')
    for ci, (label, (xs, ys)) in enumerate(sorted(series.items())):
        color = colors[ci % len(colors)]
        coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}"
                          for x, y in zip(xs, ys) if np.isfinite(y))
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{coords}"/>')
        parts.append(f'<text x="{ml + pw - 5}" y="{mt + 16 + 16 * ci}" '
                     f'text-anchor="end" font-size="12" '
                     f'fill="{color}">{label}</text>')
    parts.append("</svg>\n")
    Path(path).write_text("\n".join(parts))


# ---------------------------------------------------------------------------
# dataset files


def gen_synthetic(spec: ScenarioSpec, intrinsics: CameraIntrinsics,
                  seed: int, out_dir) -> None:
    """Write a complete synthetic dataset directory.

    Contents: model/landmark/intrinsics JSON, ground-truth poses JSON,
    binary event stream, E2F frames as PGM, and a config snapshot.
    Deterministic per seed (hash-stable bytes).
    """
    from .events import simulate_events

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, landmarks = build_satellite(step=spec.model_step)
    trajectory = make_trajectory(spec, seed)
    stream = simulate_events(model.points, trajectory, intrinsics,
                             spec.lighting_model, seed=seed)

    _dump_json(out / "model.json", {"points": model.points.tolist(),
                                    "seed": seed})
    _dump_json(out / "landmarks.json",
               {"landmarks": landmarks.landmarks.tolist(), "seed": seed})
    _dump_json(out / "intrinsics.json",
               dict(intrinsics.to_json_dict(), seed=seed))
    _dump_json(out / "poses.json",
               {"poses": [pose_to_record(t, p) for t, p in trajectory],
                "seed": seed})
    save_events_binary(out / "events.bin", stream)

    t_end_us = int(round(trajectory[-1][0] * 1e6))
    frames = e2f(stream, spec.tau, intrinsics.width, intrinsics.height,
                 t_start=0, t_end=max(t_end_us, 1))
    frames_dir = out / "frames"
    frames_dir.mkdir(exist_ok=True)
    index_lines = ["frame,t_start_us,t_end_us,max_count"]
    for i, f in enumerate(frames):
        save_frame_pgm(frames_dir / f"frame_{i:05d}.pgm", f)
        index_lines.append(f"{i},{f.t_start},{f.t_end},{f.max_count}")
    (out / "frames_index.csv").write_text("\n".join(index_lines) + "\n")

    snapshot = {
        "scenario.trajectory": spec.trajectory,
        "scenario.speed": spec.speed,
        "scenario.lighting": spec.lighting,
        "scenario.duration": _fmt(spec.duration),
        "scenario.pose_rate": _fmt(spec.effective_pose_rate),
        "scenario.radius": _fmt(spec.radius),
        "scenario.sweep_deg": _fmt(spec.sweep_deg),
        "scenario.model_step": _fmt(spec.model_step),
        "scenario.tau": _fmt(spec.tau),
        "seed": str(seed),
    }
    (out / "scenario.cfg").write_text(serialize_config(snapshot))


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True,
                                     separators=(",", ":")) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"bad JSON in {path}: {e}") from e


def load_dataset(dataset_dir, tau: float | None = None):
    """(frames, gt list of (t, Pose), intrinsics, model, landmarks, tau)."""
    d = Path(dataset_dir)
    snap = parse_config_text((d / "scenario.cfg").read_text()) \
        if (d / "scenario.cfg").exists() else {}
    if tau is None:
        tau = cfg_get(snap, "scenario.tau", float, 0.05)
    intrinsics = CameraIntrinsics.from_json_dict(
        _read_json(d / "intrinsics.json"))
    model = CadModel(np.array(_read_json(d / "model.json")["points"]))
    landmarks = LandmarkSet(
        np.array(_read_json(d / "landmarks.json")["landmarks"]))
    gt = [pose_from_record(rec)
          for rec in _read_json(d / "poses.json")["poses"]]
    stream = load_events_binary(d / "events.bin")
    t_end_us = int(round(gt[-1][0] * 1e6))
    frames = e2f(stream, tau, intrinsics.width, intrinsics.height,
                 t_start=0, t_end=max(t_end_us, 1))
    return frames, gt, intrinsics, model, landmarks, tau


def _poses_payload(results, frames, certified_flags, seed: int) -> dict:
    recs = []
    for i, (res, frame) in enumerate(zip(results, frames)):
        rec = {"index": i, "t_s": frame.t_mid_s,
               "present": res.pose is not None,
               "certified": bool(certified_flags[i]),
               "reason": res.reason}
        if res.pose is not None:
            rec.update(pose_to_record(frame.t_mid_s, res.pose))
        recs.append(rec)
    return {"frames": recs, "seed": seed}


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict, out_dir, seed: int) -> None:
    spec = ScenarioSpec(
        trajectory=cfg_get(cfg, "scenario.trajectory", str, "orbit"),
        speed=cfg_get(cfg, "scenario.speed", str, "slow"),
        lighting=cfg_get(cfg, "scenario.lighting", str, "neutral"),
        duration=cfg_get(cfg, "scenario.duration", float, 3.56),
        pose_rate=(cfg_get(cfg, "scenario.pose_rate", float)
                   if "scenario.pose_rate" in cfg else None),
        radius=cfg_get(cfg, "scenario.radius", float, 1.0),
        sweep_deg=cfg_get(cfg, "scenario.sweep_deg", float, 90.0),
        model_step=cfg_get(cfg, "scenario.model_step", float, 0.01))
    intrinsics = _intrinsics_from_cfg(cfg)
    gen_synthetic(spec, intrinsics, seed, out_dir)


def _intrinsics_from_cfg(cfg: dict) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=cfg_get(cfg, "camera.fx", float, 600.0),
        fy=cfg_get(cfg, "camera.fy", float, 600.0),
        cx=cfg_get(cfg, "camera.cx", float, 128.0),
        cy=cfg_get(cfg, "camera.cy", float, 128.0),
        width=cfg_get(cfg, "camera.width", int, 256),
        height=cfg_get(cfg, "camera.height", int, 256))


def _train_config(cfg: dict, seed: int) -> OfflineTrainConfig:
    return OfflineTrainConfig(
        epochs=cfg_get(cfg, "train.epochs", int, 40),
        batch_size=cfg_get(cfg, "train.batch_size", int, 24),
        learning_rate=cfg_get(cfg, "train.learning_rate", float, 1e-3),
        target_sigma=cfg_get(cfg, "train.target_sigma", float, 2.0),
        jitter_px=cfg_get(cfg, "train.jitter_px", float, 4.0),
        jitter_deg=cfg_get(cfg, "train.jitter_deg", float, 5.0),
        seed=seed)


def cmd_train(cfg: dict, out_dir, seed: int) -> None:
    frames, gt, intrinsics, model, landmarks, _ = load_dataset(
        cfg_get(cfg, "paths.dataset", str))
    tcfg = _train_config(cfg, seed)
    pairs = associate(frames, gt)
    dataset = [(frame, pose) for _, frame, pose in pairs]
    params = init_params(num_landmarks=len(landmarks), seed=seed)
    params, losses = offline_train(dataset, landmarks.landmarks, intrinsics,
                                   params, tcfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.cpr", params)
    lines = [f"# seed={seed}", "epoch,loss"]
    lines += [f"{e + 1},{_fmt(l)}" for e, l in enumerate(losses)]
    (out / "train_loss.csv").write_text("\n".join(lines) + "\n")


def _selfsup_config(cfg: dict, seed: int) -> SelfSupConfig:
    cert = CertifierConfig(
        gamma=cfg_get(cfg, "certifier.gamma", float, 0.9),
        epsilon=cfg_get(cfg, "certifier.epsilon", float, 100.0),
        beta=cfg_get(cfg, "certifier.beta", float, 0.975),
        q=cfg_get(cfg, "certifier.q", float, 0.9997))
    return SelfSupConfig(
        epochs=cfg_get(cfg, "selfsup.epochs", int, 20),
        batch_size=cfg_get(cfg, "selfsup.batch_size", int, 32),
        learning_rate=cfg_get(cfg, "selfsup.learning_rate", float, 1e-3),
        lr_drop_epoch=cfg_get(cfg, "selfsup.lr_drop_epoch", int, 15),
        tau=cfg_get(cfg, "selfsup.tau", float, 0.05),
        certifier=cert, seed=seed,
        use_pose_path=cfg_get(cfg, "selfsup.use_pose_path", bool, True))


def cmd_selftrain(cfg: dict, out_dir, seed: int) -> None:
    scfg = _selfsup_config(cfg, seed)
    frames, gt, intrinsics, model, landmarks, _ = load_dataset(
        cfg_get(cfg, "paths.dataset", str), tau=scfg.tau)
    params = load_checkpoint(cfg_get(cfg, "paths.checkpoint", str))

    cert_log = ["epoch,frame,score,passed"]

    def on_frame(epoch, fi, cert, _params):
        if cert is None:
            cert_log.append(f"{epoch},{fi},inf,False")
        else:
            cert_log.append(f"{epoch},{fi},{_fmt(cert.score)},{cert.passed}")

    params, reports, results = run_self_supervision(
        frames, params, model, landmarks, intrinsics, scfg,
        on_frame=on_frame)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "adapted.cpr", params)
    lines = [f"# seed={seed}", "epoch,certified,total,mean_loss,epsilon"]
    for r in reports:
        lines.append(f"{r.epoch},{r.certified_count},{r.total_count},"
                     f"{_fmt(r.mean_loss)},{_fmt(r.epsilon)}")
    (out / "epochs.csv").write_text("\n".join(lines) + "\n")
    (out / "cert_log.csv").write_text(f"# seed={seed}\n"
                                      + "\n".join(cert_log) + "\n")

    # certify the final poses at the post-annealing threshold
    final_cfg = scfg.certifier
    for _ in reports:
        from .certifier import anneal
        final_cfg = anneal(final_cfg)
    certified = []
    for frame, res in zip(frames, results):
        if res.pose is None:
            certified.append(False)
        else:
            certified.append(certify(frame, res.pose, model.points,
                                     intrinsics, final_cfg).passed)
    _dump_json(out / "poses.json",
               _poses_payload(results, frames, certified, seed))


def cmd_infer(cfg: dict, out_dir, seed: int) -> None:
    tau = cfg_get(cfg, "selfsup.tau", float, 0.05) \
        if "selfsup.tau" in cfg else None
    frames, gt, intrinsics, model, landmarks, _ = load_dataset(
        cfg_get(cfg, "paths.dataset", str), tau=tau)
    params = load_checkpoint(cfg_get(cfg, "paths.checkpoint", str))
    results = infer(frames, params, landmarks, intrinsics, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "poses.json",
               _poses_payload(results, frames, [False] * len(frames), seed))


def cmd_eval(cfg: dict, out_dir, seed: int) -> None:
    frames, gt, intrinsics, model, landmarks, _ = load_dataset(
        cfg_get(cfg, "paths.dataset", str))
    payload = _read_json(cfg_get(cfg, "paths.poses", str))
    by_index = {rec["index"]: rec for rec in payload["frames"]}

    rows = ["frame_index,t_s,phi,psi_rad,certified,pose_present"]
    per_frame = []
    skipped = 0
    for idx, frame, gt_pose in associate(frames, gt):
        rec = by_index.get(idx)
        present = bool(rec and rec.get("present"))
        certified = bool(rec and rec.get("certified"))
        if not present:
            skipped += 1
            rows.append(f"{idx},{_fmt(frame.t_mid_s)},nan,nan,"
                        f"{certified},False")
            continue
        _, est = pose_from_record(rec)
        phi, psi = pose_errors(gt_pose, est)
        per_frame.append((phi, psi))
        rows.append(f"{idx},{_fmt(frame.t_mid_s)},{_fmt(phi)},{_fmt(psi)},"
                    f"{certified},True")
    errors = aggregate(per_frame, skipped=skipped)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "errors.csv").write_text(f"# seed={seed}\n"
                                    + "\n".join(rows) + "\n")
    _dump_json(out / "summary.json", {
        "Phi": errors.Phi, "Psi": errors.Psi,
        "median_phi": errors.median_phi, "median_psi": errors.median_psi,
        "K": errors.frame_count, "skipped": errors.skipped, "seed": seed})


def _read_csv(path, skip_comment=True):
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    rows = [ln for ln in lines
            if ln and not (skip_comment and ln.startswith("#"))]
    if not rows:
        raise DataError(f"{path} is empty")
    header = rows[0].split(",")
    return [dict(zip(header, r.split(","))) for r in rows[1:]]


def cmd_report(cfg: dict, out_dir, seed: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epochs_csv = cfg_get(cfg, "paths.epochs_csv", str, "")
    errors_csv = cfg_get(cfg, "paths.errors_csv", str, "")
    if not epochs_csv and not errors_csv:
        raise ConfigError("report needs paths.epochs_csv and/or "
                          "paths.errors_csv")
    if epochs_csv:
        rows = _read_csv(epochs_csv)
        xs = [float(r["epoch"]) for r in rows]
        fr = [int(r["certified"]) / max(int(r["total"]), 1) for r in rows]
        write_line_chart(out / "certified_fraction.svg",
                         {"certified fraction": (xs, fr)},
                         "Certified fraction per epoch", "epoch",
                         "fraction", seed=seed)
    if errors_csv:
        rows = _read_csv(errors_csv)
        xs, psis = [], []
        for r in rows:
            if r["pose_present"] == "True":
                xs.append(float(r["frame_index"]))
                psis.append(float(r["psi_rad"]))
        write_line_chart(out / "psi_per_frame.svg",
                         {"psi (rad)": (xs, psis)},
                         "Rotation error per frame", "frame", "psi (rad)",
                         seed=seed)


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {"gen": cmd_gen, "train": cmd_train, "selftrain": cmd_selftrain,
            "infer": cmd_infer, "eval": cmd_eval, "report": cmd_report}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

LOCKFILE = ".certipose.lock"


class _OutputLock:
    """Exclusive per-output-directory lockfile."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / LOCKFILE
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(f"output dir is locked by {self.path}") from None
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def run_command(name: str, config_path, out_dir, seed: int) -> None:
    if name not in COMMANDS:
        raise ConfigError(f"unknown command {name!r}")
    cfg = load_config(config_path) if config_path else {}
    if seed is None:
        seed = cfg_get(cfg, "seed", int, 0)
    with _OutputLock(out_dir):
        COMMANDS[name](cfg, out_dir, int(seed))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="certipose",
        description="Event-based satellite pose estimation with "
                    "certifiable test-time self-supervision")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=".", help="output directory")
    args = parser.parse_args(argv)
    try:
        run_command(args.command, args.config, args.out, args.seed)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except CertiposeError as e:
        print(f"error: numeric: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
