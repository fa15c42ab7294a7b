"""Toy differentiable landmark-heatmap regressor.

Architecture: three 3x3 conv layers (channels 8 -> 16 -> 16, ReLU) plus a
1x1 head producing one logit map per landmark, all at the full crop
resolution S x S.  Gradients are hand-written reverse accumulation (im2col
convolutions), so the whole pipeline stays numpy-only and finite-difference
checkable.  The input is the detected bounding box of the event frame,
bilinearly resampled to S x S through an affine crop transform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NonFiniteGradient
from .events import BBox, EventFrame

CROP_SIZE = 64
CHECKPOINT_MAGIC = b"CPR1"


@dataclass(frozen=True)
class CropTransform:
    """Affine map from crop pixel coordinates to full-frame pixels.

    [x_f, y_f]^T = A @ [x_c, y_c]^T + b, stored as a 2x3 matrix [A | b].
    """
    matrix: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse_apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        a_inv = np.linalg.inv(self.matrix[:, :2])
        return (pts - self.matrix[:, 2]) @ a_inv.T

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @staticmethod
    def from_bbox(box: BBox, crop_size: int = CROP_SIZE) -> "CropTransform":
        sx = box.width / crop_size
        sy = box.height / crop_size
        m = np.array([[sx, 0.0, box.x0], [0.0, sy, box.y0]])
        return CropTransform(matrix=m)


@dataclass
class HeatmapSet:
    maps: np.ndarray                # (Z, S, S) raw logits
    crop_transform: CropTransform


@dataclass
class Landmarks2D:
    points: np.ndarray              # (Z, 2) full-frame pixels
    confidences: np.ndarray         # (Z,) peak softmax value per map


@dataclass
class RegressorParams:
    weights: list            # conv kernels, (C_out, C_in, k, k) each
    biases: list             # (C_out,) each
    num_landmarks: int
    crop_size: int = CROP_SIZE

    def copy(self) -> "RegressorParams":
        return RegressorParams(weights=[w.copy() for w in self.weights],
                               biases=[b.copy() for b in self.biases],
                               num_landmarks=self.num_landmarks,
                               crop_size=self.crop_size)

    def check_finite(self):
        for arr in self.weights + self.biases:
            if not np.all(np.isfinite(arr)):
                raise NonFiniteGradient("non-finite parameter value")

    def fingerprint(self) -> bytes:
        import hashlib
        h = hashlib.sha256()
        for arr in self.weights + self.biases:
            h.update(arr.tobytes())
        return h.digest()


HIDDEN_CHANNELS = (8, 16, 16)


def init_params(num_landmarks: int, seed: int = 0,
                crop_size: int = CROP_SIZE) -> RegressorParams:
    """Uniform(-k, k) init with k = 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    sizes = [(HIDDEN_CHANNELS[0], 1, 3, 3),
             (HIDDEN_CHANNELS[1], HIDDEN_CHANNELS[0], 3, 3),
             (HIDDEN_CHANNELS[2], HIDDEN_CHANNELS[1], 3, 3),
             (num_landmarks, HIDDEN_CHANNELS[2], 1, 1)]
    weights, biases = [], []
    for c_out, c_in, k, _ in sizes:
        bound = 1.0 / np.sqrt(c_in * k * k)
        weights.append(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))
        biases.append(np.zeros(c_out))
    return RegressorParams(weights=weights, biases=biases,
                           num_landmarks=num_landmarks, crop_size=crop_size)


# --- convolution primitives (same padding, stride 1) ---

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (H*W, C*k*k) patches with zero same-padding."""
    c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k * k, h, w))
    for di in range(k):
        for dj in range(k):
            cols[:, di * k + dj] = xp[:, di:di + h, dj:dj + w]
    return cols.reshape(c * k * k, h * w).T


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    c_out, c_in, k, _ = w.shape
    h, wd = x.shape[1:]
    cols = _im2col(x, k)
    out = cols @ w.reshape(c_out, -1).T + b
    return out.T.reshape(c_out, h, wd), cols


def conv_backward(grad_out: np.ndarray, cols: np.ndarray, x_shape,
                  w: np.ndarray):
    """Returns (grad_x, grad_w, grad_b)."""
    c_out, c_in, k, _ = w.shape
    c, h, wd = x_shape
    g = grad_out.reshape(c_out, -1)          # (C_out, H*W)
    grad_w = (g @ cols).reshape(w.shape)
    grad_b = g.sum(axis=1)
    gcols = g.T @ w.reshape(c_out, -1)       # (H*W, C_in*k*k)
    # scatter columns back (transpose of _im2col)
    pad = k // 2
    gxp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    gc = gcols.T.reshape(c, k * k, h, wd)
    for di in range(k):
        for dj in range(k):
            gxp[:, di:di + h, dj:dj + wd] += gc[:, di * k + dj]
    if pad:
        return gxp[:, pad:-pad, pad:-pad], grad_w, grad_b
    return gxp, grad_w, grad_b


def bilinear_crop(frame_pixels: np.ndarray, transform: CropTransform,
                  crop_size: int) -> np.ndarray:
    """Resample the frame over the crop grid (pixel centers at integer crop
    coordinates); out-of-frame samples read as zero."""
    h, w = frame_pixels.shape
    xs, ys = np.meshgrid(np.arange(crop_size, dtype=float),
                         np.arange(crop_size, dtype=float))
    pts = transform.apply(np.column_stack([xs.ravel(), ys.ravel()]))
    fx, fy = pts[:, 0], pts[:, 1]
    x0 = np.floor(fx).astype(int)
    y0 = np.floor(fy).astype(int)
    ax = fx - x0
    ay = fy - y0
    out = np.zeros(crop_size * crop_size)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (ax if dx else 1 - ax) * (ay if dy else 1 - ay)
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            out[ok] += wgt[ok] * frame_pixels[yi[ok], xi[ok]]
    return out.reshape(crop_size, crop_size)


def standardize(crop: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance input normalization.

    Without it the sparse event crops drive the conv features toward zero
    and plain gradient descent on the heatmap loss becomes too
    ill-conditioned to train.  An all-constant crop maps to all zeros.
    """
    std = float(crop.std())
    if std < 1e-12:
        return np.zeros_like(crop)
    return (crop - crop.mean()) / std


@dataclass
class ForwardCache:
    """Intermediates needed by reverse accumulation."""
    crop: np.ndarray
    activations: list            # pre-layer inputs, per conv layer
    cols: list                   # im2col matrices, per conv layer
    relu_masks: list             # post-conv positive masks, hidden layers


def forward(frame: EventFrame, box: BBox, params: RegressorParams,
            crop_transform: CropTransform | None = None):
    """Run the network on the detected crop.

    Returns (HeatmapSet, ForwardCache); the cache feeds backward_update.
    """
    if crop_transform is None:
        crop_transform = CropTransform.from_bbox(box, params.crop_size)
    crop = bilinear_crop(frame.pixels, crop_transform, params.crop_size)
    crop = standardize(crop)
    x = crop[None]
    activations, cols_list, masks = [], [], []
    n_layers = len(params.weights)
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        activations.append(x)
        out, cols = conv_forward(x, w, b)
        cols_list.append(cols)
        if li < n_layers - 1:
            mask = out > 0
            masks.append(mask)
            x = out * mask
        else:
            x = out
    cache = ForwardCache(crop=crop, activations=activations, cols=cols_list,
                         relu_masks=masks)
    return HeatmapSet(maps=x, crop_transform=crop_transform), cache


def param_gradients(params: RegressorParams, cache: ForwardCache,
                    grad_maps: np.ndarray):
    """Reverse accumulation of d(loss)/d(params) given d(loss)/d(heatmaps)."""
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    g = np.asarray(grad_maps, dtype=float)
    for li in range(len(params.weights) - 1, -1, -1):
        if li < len(params.weights) - 1:
            g = g * cache.relu_masks[li]
        g, gw, gb = conv_backward(g, cache.cols[li],
                                  cache.activations[li].shape,
                                  params.weights[li])
        grads_w[li] = gw
        grads_b[li] = gb
    return grads_w, grads_b


def backward_update(params: RegressorParams, cache: ForwardCache,
                    grad_maps: np.ndarray, learning_rate: float) -> RegressorParams:
    """Plain gradient-descent step: params' = params - lr * grad.

    Raises NonFiniteGradient (and leaves params untouched) if any gradient
    entry is NaN/Inf, so callers can skip the batch and log it.
    """
    grads_w, grads_b = param_gradients(params, cache, grad_maps)
    for g in grads_w + grads_b:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN/Inf")
    out = params.copy()
    for li in range(len(out.weights)):
        out.weights[li] -= learning_rate * grads_w[li]
        out.biases[li] -= learning_rate * grads_b[li]
    out.check_finite()
    return out


# --- soft-argmax ---

def softmax2d(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def soft_argmax(maps: HeatmapSet, temperature: float = 1.0) -> Landmarks2D:
    """Expectation of pixel coordinates under softmax(logits / temperature),
    mapped to full-frame pixels through the crop transform."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z, s, _ = maps.maps.shape
    xs, ys = np.meshgrid(np.arange(s, dtype=float), np.arange(s, dtype=float))
    pts = np.empty((z, 2))
    conf = np.empty(z)
    for i in range(z):
        p = softmax2d(maps.maps[i], temperature)
        pts[i] = (float((p * xs).sum()), float((p * ys).sum()))
        conf[i] = float(p.max())
    return Landmarks2D(points=maps.crop_transform.apply(pts),
                       confidences=conf)


def soft_argmax_vjp(maps: HeatmapSet, temperature: float,
                    grad_points: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product: d(loss)/d(logits) given d(loss)/d(full-frame
    points) of shape (Z, 2)."""
    z, s, _ = maps.maps.shape
    xs, ys = np.meshgrid(np.arange(s, dtype=float), np.arange(s, dtype=float))
    a_lin = maps.crop_transform.linear
    out = np.empty_like(maps.maps)
    for i in range(z):
        p = softmax2d(maps.maps[i], temperature)
        mean_x = (p * xs).sum()
        mean_y = (p * ys).sum()
        # pull the full-frame gradient back through the affine map
        gc = a_lin.T @ np.asarray(grad_points[i], dtype=float)
        inner = gc[0] * (xs - mean_x) + gc[1] * (ys - mean_y)
        out[i] = p * inner / temperature
    return out


# --- offline training ---

def gaussian_target(center_xy, size: int, sigma: float) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(size, dtype=float),
                         np.arange(size, dtype=float))
    cx, cy = center_xy
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))


@dataclass
class OfflineTrainConfig:
    epochs: int = 40
    batch_size: int = 24
    learning_rate: float = 1e-3
    lr_drop_epochs: tuple = (25, 35)   # x0.1 at each (1-based epochs)
    lr_drop_factor: float = 0.1
    target_sigma: float = 2.0
    jitter_px: float = 4.0
    jitter_deg: float = 5.0
    seed: int = 0


def learning_rate_at_epoch(cfg: OfflineTrainConfig, epoch: int) -> float:
    """1-based epoch index; drops by lr_drop_factor at each listed epoch."""
    lr = cfg.learning_rate
    for e in cfg.lr_drop_epochs:
        if epoch >= e:
            lr *= cfg.lr_drop_factor
    return lr


def _jitter_transform(base: CropTransform, rng, jitter_px: float,
                      jitter_deg: float, crop_size: int) -> CropTransform:
    """Random SE(2) jitter of the crop window (rotation about crop center
    plus translation), applied in full-frame coordinates."""
    ang = np.deg2rad(rng.uniform(-jitter_deg, jitter_deg))
    dx = rng.uniform(-jitter_px, jitter_px)
    dy = rng.uniform(-jitter_px, jitter_px)
    c, s = np.cos(ang), np.sin(ang)
    rot = np.array([[c, -s], [s, c]])
    center = np.array([(crop_size - 1) / 2.0, (crop_size - 1) / 2.0])
    a = base.matrix[:, :2] @ rot
    b = base.matrix[:, :2] @ (center - rot @ center) + base.matrix[:, 2] + [dx, dy]
    return CropTransform(matrix=np.column_stack([a, b]))


def offline_train(dataset, landmarks_3d, intrinsics, params: RegressorParams,
                  cfg: OfflineTrainConfig, detect=None, epoch_hook=None):
    """Supervised pre-training on (EventFrame, ground-truth Pose) pairs.

    Targets are Gaussian heatmaps centered at the projected ground-truth
    landmarks in crop coordinates.  Mini-batch gradient descent, no
    momentum; the learning rate drops by 0.1 at the configured epochs.
    Returns (params, per-epoch mean loss list).
    """
    from .events import detect_bbox
    from .geometry import project_points

    if not dataset:
        raise ValueError("empty training dataset")
    detect = detect or (lambda f: detect_bbox(f))
    rng = np.random.default_rng(cfg.seed)
    s = params.crop_size
    z = params.num_landmarks

    samples = []
    for frame, pose in dataset:
        try:
            box = detect(frame)
        except Exception:
            continue
        uv = project_points(landmarks_3d, intrinsics, pose)
        samples.append((frame, box, uv))
    if not samples:
        raise ValueError("no trainable samples (all frames empty)")

    losses = []
    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate_at_epoch(cfg, epoch)
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        count = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for si in batch:
                frame, box, uv = samples[si]
                base = CropTransform.from_bbox(box, s)
                tr = _jitter_transform(base, rng, cfg.jitter_px,
                                       cfg.jitter_deg, s)
                maps, cache = forward(frame, box, params, crop_transform=tr)
                crop_uv = tr.inverse_apply(uv)
                target = np.zeros((z, s, s))
                for i in range(z):
                    cx, cy = crop_uv[i]
                    if -2 * cfg.target_sigma <= cx < s + 2 * cfg.target_sigma \
                            and -2 * cfg.target_sigma <= cy < s + 2 * cfg.target_sigma:
                        target[i] = gaussian_target((cx, cy), s,
                                                    cfg.target_sigma)
                diff = maps.maps - target
                loss = float(np.mean(diff ** 2))
                grad = 2.0 * diff / diff.size
                if lr > 0.0:
                    params = backward_update(params, cache, grad, lr)
                epoch_loss += loss
                count += 1
        losses.append(epoch_loss / max(count, 1))
        if epoch_hook is not None:
            epoch_hook(epoch, lr, losses[-1])
    return params, losses


# --- checkpoint format ---

def save_checkpoint(path, params: RegressorParams) -> None:
    """Versioned binary: magic "CPR1", array count, per-array shape headers
    and little-endian float64 payloads."""
    arrays = []
    for w, b in zip(params.weights, params.biases):
        arrays.extend([w, b])
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", len(arrays), params.crop_size))
        for arr in arrays:
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> RegressorParams:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"bad checkpoint magic {magic!r}")
        n_arrays, crop_size = struct.unpack("<II", f.read(8))
        arrays = []
        for _ in range(n_arrays):
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape))
            data = np.frombuffer(f.read(8 * count), dtype="<f8")
            if data.size != count:
                raise DataError("truncated checkpoint payload")
            arrays.append(data.reshape(shape).copy())
    if n_arrays % 2:
        raise DataError("checkpoint must hold weight/bias pairs")
    weights = arrays[0::2]
    biases = arrays[1::2]
    return RegressorParams(weights=weights, biases=biases,
                           num_landmarks=weights[-1].shape[0],
                           crop_size=crop_size)
