"""Primitive densification: covisibility view selection, statistical
outlier filtering, and radius-gated insertion of new Gaussians.

New primitives come from a pluggable point source (by default unprojected
depth maps of selected pseudo views), are cleaned by a k-NN
distance-to-neighbors outlier rule, and are inserted only where no
existing or newly inserted primitive mean lies within the exclusion
radius, processed in confidence-descending order so confident points win
conflicts.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera
from .gaussians import GaussianCloud, rgb_to_sh0
from .guidance import bilinear_sample

OPACITY_LOGIT_NEW = float(np.log(0.1 / 0.9))  # alpha = 0.1


@dataclass
class ViewSample:
    """One view handed to densification: camera, image, and a depth map."""

    camera: Camera
    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), 0 where invalid
    confidence: np.ndarray | None = None  # (H, W) in [0, 1]


class PointSource(ABC):
    """Produces world points with colors and confidences from views."""

    @abstractmethod
    def points_for(self, views: list[ViewSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (points (N, 3), colors (N, 3), confidence (N,))."""


class DepthUnprojectionSource(PointSource):
    """Unprojects valid depth pixels into world space on a pixel stride."""

    def __init__(self, stride: int = 2):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.stride = stride

    def points_for(self, views):
        pts, cols, confs = [], [], []
        for v in views:
            h, w = v.depth.shape
            ys, xs = np.mgrid[0:h:self.stride, 0:w:self.stride]
            depth = v.depth[ys, xs]
            ok = depth > 0
            if not ok.any():
                continue
            pix = np.stack([xs[ok], ys[ok]], axis=-1).astype(np.float64)
            world = v.camera.unproject(pix, depth[ok])
            color = np.asarray(v.image, dtype=np.float64)[ys[ok], xs[ok]]
            if v.confidence is not None:
                conf = np.asarray(v.confidence, dtype=np.float64)[ys[ok], xs[ok]]
            else:
                conf = np.ones(int(ok.sum()))
            pts.append(world)
            cols.append(color)
            confs.append(conf)
        if not pts:
            return np.empty((0, 3)), np.empty((0, 3)), np.empty(0)
        return np.concatenate(pts), np.concatenate(cols), np.concatenate(confs)


class SpatialIndex:
    """Uniform-grid index over 3D points with exact radius queries."""

    def __init__(self, cell_size: float):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cell = float(cell_size)
        self._cells: dict[tuple[int, int, int], list[int]] = {}
        self._points: list[np.ndarray] = []

    def _key(self, p) -> tuple[int, int, int]:
        return tuple(int(np.floor(c / self.cell)) for c in p)

    def insert(self, point) -> int:
        p = np.asarray(point, dtype=np.float64)
        idx = len(self._points)
        self._points.append(p)
        self._cells.setdefault(self._key(p), []).append(idx)
        return idx

    def query_radius(self, point, radius: float) -> list[int]:
        """Indices of all inserted points with Euclidean distance <= radius."""
        p = np.asarray(point, dtype=np.float64)
        reach = int(np.ceil(radius / self.cell))
        kx, ky, kz = self._key(p)
        out = []
        r2 = radius * radius
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                for dz in range(-reach, reach + 1):
                    for idx in self._cells.get((kx + dx, ky + dy, kz + dz), ()):
                        d = self._points[idx] - p
                        if float(d @ d) <= r2:
                            out.append(idx)
        return out

    def min_distance(self, point) -> float:
        """Distance to the nearest inserted point within one cell reach; inf if none."""
        p = np.asarray(point, dtype=np.float64)
        best = np.inf
        kx, ky, kz = self._key(p)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for idx in self._cells.get((kx + dx, ky + dy, kz + dz), ()):
                        d = self._points[idx] - p
                        best = min(best, float(np.sqrt(d @ d)))
        return best


def covisibility(
    cam_a: Camera, depth_a: np.ndarray, cam_b: Camera, depth_b: np.ndarray,
    rel_tol: float = 0.05,
) -> float:
    """Fraction of a's valid-depth pixels visible in b with consistent depth."""
    h, w = depth_a.shape
    ys, xs = np.mgrid[0:h, 0:w]
    ok = depth_a > 0
    if not ok.any():
        return 0.0
    pix = np.stack([xs[ok], ys[ok]], axis=-1).astype(np.float64)
    world = cam_a.unproject(pix, depth_a[ok])
    q, z = cam_b.project(world)
    front = z > 0
    sampled, inside = bilinear_sample(depth_b, q)
    agree = front & inside & (sampled > 0) & (np.abs(z - sampled) <= rel_tol * np.maximum(sampled, 1e-9))
    return float(agree.sum() / ok.sum())


def select_densify_views(views: list[ViewSample], covis_threshold: float = 0.6) -> list[int]:
    """Greedy low-covisibility subset, starting from the first view.

    A view joins iff its covisibility with every already selected view is
    below the threshold, so the result spreads over the scene with little
    redundancy.
    """
    if not views:
        return []
    selected = [0]
    for i in range(1, len(views)):
        cands = [covisibility(views[i].camera, views[i].depth, views[j].camera, views[j].depth)
                 for j in selected]
        if all(c < covis_threshold for c in cands):
            selected.append(i)
    return selected


def filter_outliers(points: np.ndarray, k_neighbors: int = 10, m_sigma: float = 2.0) -> np.ndarray:
    """Keep-mask dropping points whose mean k-NN distance is anomalous.

    A point survives iff its mean distance to the k nearest others is at
    most global_mean + m_sigma * global_std of that statistic.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k_neighbors + 1:
        raise ValueError(f"need at least {k_neighbors + 1} points")
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=k_neighbors + 1)
    mean_d = dists[:, 1:].mean(axis=1)
    cutoff = mean_d.mean() + m_sigma * mean_d.std()
    return mean_d <= cutoff


def median_nn_distance(means: np.ndarray) -> float:
    if means.shape[0] < 2:
        return 1.0
    tree = cKDTree(means)
    dists, _ = tree.query(means, k=2)
    return float(np.median(dists[:, 1]))


@dataclass
class InsertionRules:
    """Initialization of inserted primitives."""

    scale_neighbors: int = 3  # scale = mean distance to this many neighbors / 2
    opacity_logit: float = OPACITY_LOGIT_NEW
    max_insert: int | None = None


def insert_primitives(
    cloud: GaussianCloud,
    points: np.ndarray,
    colors: np.ndarray,
    confidence: np.ndarray,
    radius: float,
    rules: InsertionRules | None = None,
) -> tuple[GaussianCloud, int]:
    """Insert new Gaussians at points with no primitive within the radius.

    Candidates are processed in confidence-descending order (ties keep the
    input order), and each accepted point immediately joins the exclusion
    set, so no two accepted means are closer than the radius either.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    rules = rules or InsertionRules()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return cloud, 0

    order = np.argsort(-np.asarray(confidence), kind="stable")
    index = SpatialIndex(cell_size=radius)
    for m in cloud.means:
        index.insert(m)

    accepted = []
    for i in order:
        if rules.max_insert is not None and len(accepted) >= rules.max_insert:
            break
        p = points[i]
        if not np.all(np.isfinite(p)):
            continue
        hits = index.query_radius(p, radius)
        blocked = any(np.linalg.norm(np.asarray(index._points[h]) - p) < radius for h in hits)
        if blocked:
            continue
        index.insert(p)
        accepted.append(i)

    if not accepted:
        return cloud, 0
    new_means = points[accepted]
    new_colors = np.asarray(colors, dtype=np.float64)[accepted]

    all_means = np.concatenate([cloud.means, new_means]) if cloud.count else new_means
    tree = cKDTree(all_means)
    k = min(rules.scale_neighbors + 1, all_means.shape[0])
    dists, _ = tree.query(new_means, k=k)
    local = dists[:, 1:].mean(axis=1) if k > 1 else np.full(len(accepted), radius)
    scales = np.maximum(local / 2.0, 1e-5)

    n = len(accepted)
    n_coeffs = cloud.sh_coeffs.shape[1]
    sh = np.zeros((n, n_coeffs, 3))
    sh[:, 0, :] = rgb_to_sh0(np.clip(new_colors, 0.0, 1.0))
    addition = GaussianCloud(
        means=new_means,
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        log_scales=np.log(scales)[:, None].repeat(3, axis=1),
        logit_opacities=np.full(n, rules.opacity_logit),
        sh_coeffs=sh,
    )
    return GaussianCloud.concatenate(cloud, addition), n


def densify_from_views(
    cloud: GaussianCloud,
    views: list[ViewSample],
    source: PointSource,
    covis_threshold: float = 0.6,
    k_neighbors: int = 10,
    m_sigma: float = 2.0,
    radius_factor: float = 1.5,
    rules: InsertionRules | None = None,
) -> tuple[GaussianCloud, int]:
    """Full densification pass: select views, source points, filter, insert.

    The exclusion radius is radius_factor times the cloud's current median
    nearest-neighbor distance, tying insertion density to scene density.
    """
    chosen = select_densify_views(views, covis_threshold)
    pts, cols, conf = source.points_for([views[i] for i in chosen])
    if pts.shape[0] == 0:
        return cloud, 0
    if pts.shape[0] >= k_neighbors + 1:
        keep = filter_outliers(pts, k_neighbors, m_sigma)
        pts, cols, conf = pts[keep], cols[keep], conf[keep]
    radius = radius_factor * median_nn_distance(cloud.means)
    return insert_primitives(cloud, pts, cols, conf, radius, rules)
