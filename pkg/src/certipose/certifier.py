"""Pose certification against event frames via percentile Hausdorff distance.

The certificate chain: threshold the event frame into a 2D point cloud,
project the dense CAD cloud under the candidate pose, take per-event-point
nearest-neighbour distances into the projected cloud, and compare the q-th
nearest-rank percentile against the (annealed) threshold epsilon.  The
distance is one-directional (events -> model) on purpose: a projection that
covers the events but extends beyond them still certifies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptySet, NonPositiveDepth
from .events import EventFrame, SegmentedCloud, segment_events
from .geometry import CameraIntrinsics, Pose, project_points

GRID_CELL_PX = 8.0


@dataclass(frozen=True)
class CertifierConfig:
    gamma: float = 0.9
    epsilon: float = 100.0
    beta: float = 0.975
    q: float = 0.9997

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not (0.0 < self.beta <= 1.0):
            raise ValueError("beta must be in (0, 1]")
        if not (0.0 < self.q <= 1.0):
            raise ValueError("q must be in (0, 1]")


@dataclass(frozen=True)
class Certificate:
    score: float
    passed: bool
    num_event_points: int
    num_model_points: int


def project_cad(model_points, intrinsics: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Projected dense CAD cloud (M, 2); duplicates allowed."""
    return project_points(model_points, intrinsics, pose)


class _GridIndex:
    """Uniform pixel-grid bucket index for exact 2D nearest neighbours.

    Cells are GRID_CELL_PX wide; queries expand in rings until the best
    candidate distance is provably below the next ring's lower bound.
    """

    def __init__(self, points: np.ndarray, cell: float = GRID_CELL_PX):
        self.points = np.asarray(points, dtype=float)
        self.cell = cell
        ij = np.floor(self.points / cell).astype(np.int64)
        order = np.lexsort((ij[:, 1], ij[:, 0]))
        sorted_ij = ij[order]
        keep = np.ones(len(order), dtype=bool)
        keep[1:] = np.any(sorted_ij[1:] != sorted_ij[:-1], axis=1)
        self.cell_ij = sorted_ij[keep]                 # (K, 2) occupied cells
        self.cell_start = np.nonzero(keep)[0]          # bucket slices in order
        self.cell_stop = np.append(self.cell_start[1:], len(order))
        self.order = order

    def _bucket_min(self, cells, px, py) -> float:
        idx = np.concatenate([self.order[self.cell_start[k]:self.cell_stop[k]]
                              for k in cells])
        pts = self.points[idx]
        # same arithmetic as the brute-force oracle, bit-exactly
        return float(np.min(np.sqrt((pts[:, 0] - px) ** 2
                                    + (pts[:, 1] - py) ** 2)))

    def nearest_distance(self, p) -> float:
        px, py = float(p[0]), float(p[1])
        ci = int(math.floor(px / self.cell))
        cj = int(math.floor(py / self.cell))
        # Chebyshev ring of every occupied cell; any point in a cell at ring
        # r is at least (r - 1) * cell away, so after scanning the nearest
        # occupied ring + 1 only cells not provably worse remain.
        ring = np.maximum(np.abs(self.cell_ij[:, 0] - ci),
                          np.abs(self.cell_ij[:, 1] - cj))
        near = ring.min() + 1
        best = self._bucket_min(np.nonzero(ring <= near)[0], px, py)
        tail = np.nonzero((ring > near)
                          & ((ring - 1) * self.cell <= best))[0]
        if tail.size:
            best = min(best, self._bucket_min(tail, px, py))
        return best


def nn_distances(event_points: SegmentedCloud, model_points: np.ndarray) -> np.ndarray:
    """Per-event-point Euclidean distance to the nearest projected model point."""
    ep = np.asarray(event_points.points, dtype=float)
    mp = np.asarray(model_points, dtype=float)
    if ep.size == 0 or mp.size == 0:
        raise EmptySet("nearest-neighbour query over an empty set")
    index = _GridIndex(mp)
    return np.array([index.nearest_distance(p) for p in ep])


def nn_distances_bruteforce(event_points: SegmentedCloud,
                            model_points: np.ndarray) -> np.ndarray:
    """O(P*M) scan; the test oracle for the grid index."""
    ep = np.asarray(event_points.points, dtype=float)
    mp = np.asarray(model_points, dtype=float)
    if ep.size == 0 or mp.size == 0:
        raise EmptySet("nearest-neighbour query over an empty set")
    d = np.sqrt((ep[:, None, 0] - mp[None, :, 0]) ** 2
                + (ep[:, None, 1] - mp[None, :, 1]) ** 2)
    return d.min(axis=1)


def hausdorff_percentile(distances, q: float) -> float:
    """Nearest-rank percentile: sorted ascending, element ceil(q*P) - 1."""
    d = np.sort(np.asarray(distances, dtype=float))
    if d.size == 0:
        raise EmptySet("percentile of an empty distance set")
    if not (0.0 < q <= 1.0):
        raise ValueError("q must be in (0, 1]")
    idx = min(max(int(math.ceil(q * d.size)) - 1, 0), d.size - 1)
    return float(d[idx])


def certify(frame: EventFrame, pose: Pose, model_points,
            intrinsics: CameraIntrinsics, config: CertifierConfig) -> Certificate:
    """Full certification chain; fails closed (score = inf) on empty
    segmentation or a projection behind the camera."""
    cloud = segment_events(frame, config.gamma)
    m = np.asarray(model_points).shape[0]
    if len(cloud) == 0:
        return Certificate(score=np.inf, passed=False,
                           num_event_points=0, num_model_points=m)
    try:
        projected = project_cad(model_points, intrinsics, pose)
    except NonPositiveDepth:
        return Certificate(score=np.inf, passed=False,
                           num_event_points=len(cloud), num_model_points=m)
    dists = nn_distances(cloud, projected)
    score = hausdorff_percentile(dists, config.q)
    return Certificate(score=score, passed=bool(score <= config.epsilon),
                       num_event_points=len(cloud), num_model_points=m)


def anneal(config: CertifierConfig) -> CertifierConfig:
    """epsilon' = beta * epsilon; everything else unchanged."""
    return replace(config, epsilon=config.beta * config.epsilon)
