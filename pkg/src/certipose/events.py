"""Event streams, procedural event simulation, E2F batching and segmentation.

An event stream is a structured numpy array with fields (t, x, y, p):
timestamp in microseconds, pixel coordinates and polarity (+1/-1),
time-sorted.  The simulator replaces a renderer + sensor emulator pair at
desk scale: it shades the CAD point cloud per pose, z-buffers it into an
intensity image and emits events where the per-pixel log intensity steps by
more than the contrast threshold.  A harsh-lighting model multiplies event
rates on surfaces facing a directional light, reproducing non-uniform event
densities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, EmptyFrame
from .geometry import CameraIntrinsics, Pose, project_points

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])

AMBIENT = 0.08
LOG_EPS = 0.02


def make_events(t_us, x, y, p) -> np.ndarray:
    ev = np.empty(len(t_us), dtype=EVENT_DTYPE)
    ev["t"], ev["x"], ev["y"], ev["p"] = t_us, x, y, p
    return ev


@dataclass
class EventFrame:
    pixels: np.ndarray          # (H, W) floats in [0, 1]
    t_start: int                # microseconds
    t_end: int
    max_count: int = 0          # normalization divisor; 0 for empty windows

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def t_mid_s(self) -> float:
        return 0.5 * (self.t_start + self.t_end) * 1e-6


@dataclass
class SegmentedCloud:
    points: np.ndarray          # (P, 2) pixel coordinates (x, y)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class LightingModel:
    contrast_threshold: float = 0.15
    direction: tuple = (0.0, 0.0, -1.0)   # unit vector toward the light, camera frame
    harshness: float = 0.0
    noise_rate: float = 0.0               # spurious events / pixel / second
    ambient: float = AMBIENT

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast_threshold must be > 0")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be >= 0")
        d = np.linalg.norm(self.direction)
        if not np.isfinite(d) or d == 0:
            raise ValueError("direction must be a nonzero vector")

    def unit_direction(self) -> np.ndarray:
        d = np.asarray(self.direction, dtype=float)
        return d / np.linalg.norm(d)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, inclusive pixel bounds."""
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1


def e2f(stream: np.ndarray, tau: float, width: int, height: int,
        t_start: int | None = None, t_end: int | None = None) -> list[EventFrame]:
    """Batch a time-sorted event stream into consecutive disjoint windows.

    Each window is a per-pixel count histogram (both polarities accumulate)
    normalized by the window's max count; empty windows yield all-zero
    frames.  Window bounds default to the stream's time span.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    tau_us = int(round(tau * 1e6))
    if stream.size:
        if np.any(np.diff(stream["t"].astype(np.int64)) < 0):
            raise DataError("event stream is not time-sorted")
    if t_start is None:
        t_start = int(stream["t"][0]) if stream.size else 0
    if t_end is None:
        t_end = int(stream["t"][-1]) + 1 if stream.size else t_start + tau_us
    n_windows = max(1, int(np.ceil((t_end - t_start) / tau_us - 1e-9)))
    frames = []
    for k in range(n_windows):
        w0 = t_start + k * tau_us
        w1 = w0 + tau_us
        sel = stream[(stream["t"] >= w0) & (stream["t"] < w1)]
        counts = np.zeros((height, width), dtype=np.int64)
        if sel.size:
            np.add.at(counts, (sel["y"].astype(int), sel["x"].astype(int)), 1)
        m = int(counts.max())
        pixels = counts / m if m > 0 else counts.astype(float)
        frames.append(EventFrame(pixels=pixels, t_start=w0, t_end=w1,
                                 max_count=m))
    return frames


def estimate_normals(points: np.ndarray, k: int = 12) -> np.ndarray:
    """Per-point surface normals from local PCA over k nearest neighbours."""
    pts = np.asarray(points, dtype=float)
    tree = cKDTree(pts)
    k = min(k, len(pts))
    _, idx = tree.query(pts, k=k)
    nb = pts[idx]                                  # (N, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k - 1)
    _, vecs = np.linalg.eigh(cov)
    return np.ascontiguousarray(vecs[:, :, 0])


def render_intensity(points_body: np.ndarray, normals_body: np.ndarray,
                     pose: Pose, intrinsics: CameraIntrinsics,
                     lighting: LightingModel):
    """Z-buffered Lambertian splat of the point cloud.

    Returns (intensity, gain): (H, W) images.  intensity is 0 on background,
    max(ambient, n.l) clipped at 1 on object pixels.  gain is the
    harsh-lighting event-rate multiplier, 0 where intensity saturates
    (specular-like clipping kills contrast events) and on background.
    """
    h, w = intrinsics.height, intrinsics.width
    uv = project_points(points_body, intrinsics, pose)
    cam = pose.apply(points_body)
    n_cam = normals_body @ pose.rotation.T
    # orient normals toward the camera
    flip = np.einsum("ij,ij->i", n_cam, cam) > 0
    n_cam[flip] *= -1
    light = lighting.unit_direction()
    ndotl = np.maximum(0.0, n_cam @ light)
    # Diffuse term stays below 1; only the harshness-driven specular lobe can
    # push a pixel into saturation, which then kills its contrast events.
    shade = lighting.ambient + 0.8 * ndotl + 0.5 * lighting.harshness * ndotl ** 8
    gain = 1.0 + lighting.harshness * ndotl ** 2
    sat = shade >= 1.0
    shade = np.minimum(shade, 1.0)
    gain[sat] = 0.0

    xi = np.round(uv[:, 0]).astype(int)
    yi = np.round(uv[:, 1]).astype(int)
    ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    intensity = np.zeros((h, w))
    gain_img = np.zeros((h, w))
    # nearest point per pixel (ties: lowest point index), vectorized
    pix = yi[ok] * w + xi[ok]
    order = np.lexsort((np.nonzero(ok)[0], cam[ok, 2]))
    _, first = np.unique(pix[order], return_index=True)
    win = order[first]
    intensity.ravel()[pix[win]] = shade[ok][win]
    gain_img.ravel()[pix[win]] = gain[ok][win]
    return intensity, gain_img


def simulate_events(model_points: np.ndarray, trajectory,
                    intrinsics: CameraIntrinsics, lighting: LightingModel,
                    seed: int = 0, normals: np.ndarray | None = None) -> np.ndarray:
    """Emit a time-sorted event stream for a posed trajectory.

    trajectory: list of (timestamp_seconds, Pose), strictly increasing.
    Per pixel and per pose interval the base event count is
    floor(|dlog I| / contrast_threshold), scaled by the harsh-lighting gain,
    plus Poisson-distributed spurious events.  Deterministic given seed.
    """
    if len(trajectory) < 2:
        raise ValueError("trajectory needs >= 2 poses")
    times = np.array([t for t, _ in trajectory])
    if np.any(np.diff(times) <= 0):
        raise ValueError("trajectory timestamps must be strictly increasing")
    if normals is None:
        normals = estimate_normals(model_points)
    rng = np.random.default_rng(seed)
    h, w = intrinsics.height, intrinsics.width

    prev_int = None
    chunks = []
    for k, (t_s, pose) in enumerate(trajectory):
        intensity, gain = render_intensity(model_points, normals, pose,
                                           intrinsics, lighting)
        if prev_int is not None:
            t0_us = int(round(times[k - 1] * 1e6))
            t1_us = int(round(t_s * 1e6))
            dt = (t1_us - t0_us) * 1e-6
            dlog = (np.log(intensity + LOG_EPS) - np.log(prev_int + LOG_EPS))
            base = np.floor(np.abs(dlog) / lighting.contrast_threshold)
            g = np.where(gain > 0, gain, np.where(prev_gain > 0, prev_gain, 0.0))
            counts = np.floor(base * g).astype(np.int64)
            ys, xs = np.nonzero(counts)
            if ys.size:
                reps = counts[ys, xs]
                ex = np.repeat(xs, reps)
                ey = np.repeat(ys, reps)
                ep = np.repeat(np.sign(dlog[ys, xs]).astype(np.int8), reps)
                et = rng.integers(t0_us, t1_us, size=ex.size,
                                  dtype=np.int64).astype(np.uint64)
                chunks.append(make_events(et, ex, ey, ep))
            if lighting.noise_rate > 0:
                n_noise = rng.poisson(lighting.noise_rate * dt * w * h)
                if n_noise:
                    nx = rng.integers(0, w, size=n_noise)
                    ny = rng.integers(0, h, size=n_noise)
                    np_pol = np.where(rng.random(n_noise) < 0.5, 1, -1).astype(np.int8)
                    nt = rng.integers(t0_us, t1_us, size=n_noise,
                                      dtype=np.int64).astype(np.uint64)
                    chunks.append(make_events(nt, nx, ny, np_pol))
        prev_int, prev_gain = intensity, gain

    if not chunks:
        return np.empty(0, dtype=EVENT_DTYPE)
    stream = np.concatenate(chunks)
    order = np.lexsort((stream["p"], stream["y"], stream["x"], stream["t"]))
    return stream[order]


def segment_events(frame: EventFrame, gamma: float) -> SegmentedCloud:
    """Pixels with normalized value >= gamma, as (x, y) points, row-major."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must be in (0, 1]")
    ys, xs = np.nonzero(frame.pixels >= gamma)
    return SegmentedCloud(points=np.column_stack([xs, ys]).astype(float))


def detect_bbox(frame: EventFrame, mass_quantile: float = 0.98,
                margin_px: int = 8) -> BBox:
    """Tightest box over the brightest pixels holding `mass_quantile` of the
    total event mass, expanded by margin_px and clipped to the frame."""
    vals = frame.pixels
    total = vals.sum()
    if total <= 0:
        raise EmptyFrame("all pixels zero")
    flat = vals.ravel()
    order = np.argsort(-flat, kind="stable")
    csum = np.cumsum(flat[order])
    n_keep = int(np.searchsorted(csum, mass_quantile * total - 1e-12)) + 1
    keep = order[:n_keep]
    ys, xs = np.unravel_index(keep, vals.shape)
    x0 = max(int(xs.min()) - margin_px, 0)
    y0 = max(int(ys.min()) - margin_px, 0)
    x1 = min(int(xs.max()) + margin_px, frame.width - 1)
    y1 = min(int(ys.max()) + margin_px, frame.height - 1)
    return BBox(x0, y0, x1, y1)


# --- serialization ---

def save_events_text(path, stream: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("t_us,x,y,p\n")
        for ev in stream:
            f.write(f"{int(ev['t'])},{int(ev['x'])},{int(ev['y'])},{int(ev['p'])}\n")


def load_events_text(path) -> np.ndarray:
    with open(path) as f:
        header = f.readline().strip()
        if header != "t_us,x,y,p":
            raise DataError(f"bad event file header: {header!r}")
        rows = [line.strip().split(",") for line in f if line.strip()]
    if not rows:
        return np.empty(0, dtype=EVENT_DTYPE)
    arr = np.array(rows, dtype=np.int64)
    return make_events(arr[:, 0].astype(np.uint64), arr[:, 1], arr[:, 2],
                       arr[:, 3].astype(np.int8))


def save_events_binary(path, stream: np.ndarray) -> None:
    with open(path, "wb") as f:
        stream.astype(EVENT_DTYPE, copy=False).tofile(f)


def load_events_binary(path) -> np.ndarray:
    return np.fromfile(path, dtype=EVENT_DTYPE)


def save_frame_pgm(path, frame: EventFrame) -> None:
    """P5 PGM dump, maxval 255, value = round(255 * pixel)."""
    data = np.round(255.0 * frame.pixels).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{frame.width} {frame.height}\n255\n".encode())
        f.write(data.tobytes())
