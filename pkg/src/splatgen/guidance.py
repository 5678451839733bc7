"""Depth-warped guidance images and cross-view consistency uncertainty.

A guidance image at an interpolated pose is built by inverse warping: each
pixel is unprojected with the depth rendered from the current Gaussian
cloud, reprojected into the nearest input view, and filled with the
bilinearly sampled input color. Its reliability is scored per pixel by a
forward/backward cyclic check combining the geometric residual |p - p'|
and the photometric residual between the cloud's color render and the
sampled input color:

    U(p) = 1 - exp(-|p - p'|^2 / s1 - |I_gs(p) - I_inp(q)|^2 / s2)

Pixels whose warp is unusable (no surface, out of bounds, behind a camera)
get U = 1, handing them entirely to the diffusion prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quaternion as quat
from .camera import Camera
from .frames import FrameSet
from .gaussians import GaussianCloud
from .render import render


@dataclass
class UncertaintyParams:
    """Bandwidths of the cyclic-consistency score.

    s1 is in squared pixels, s2 in squared linear-RGB units.
    """

    s1: float = 100.0
    s2: float = 0.25

    def __post_init__(self):
        if self.s1 <= 0 or self.s2 <= 0:
            raise ValueError("bandwidths must be positive")


@dataclass
class GuidanceFrame:
    """Warped guidance image plus validity and per-pixel uncertainty."""

    image: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool
    uncertainty: np.ndarray  # (H, W) in [0, 1]; 1 on invalid pixels
    source_view: int
    warp_q: np.ndarray | None = None  # (H, W, 2) continuous source pixels
    warp_src_depth: np.ndarray | None = None  # (H, W) depth of the warped point in the source camera


def bilinear_sample(img: np.ndarray, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample img (H, W[, C]) at continuous (x, y); returns (values, inside).

    Points outside [0, W-1] x [0, H-1] are flagged and return zeros.
    """
    h, w = img.shape[:2]
    x = xy[..., 0]
    y = xy[..., 1]
    # Sub-pixel slack keeps exact-boundary coordinates (identity warps of
    # border pixels) from being rejected by floating-point roundoff.
    eps = 1e-6
    inside = (x >= -eps) & (x <= w - 1.0 + eps) & (y >= -eps) & (y <= h - 1.0 + eps)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(xc, dtype=np.int64)
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(yc, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xc - x0
    wy = yc - y0
    if img.ndim == 3:
        wx = wx[..., None]
        wy = wy[..., None]
    v = (
        img[y0, x0] * (1 - wx) * (1 - wy)
        + img[y0, x1] * wx * (1 - wy)
        + img[y1, x0] * (1 - wx) * wy
        + img[y1, x1] * wx * wy
    )
    mask = inside if img.ndim == 2 else inside[..., None]
    return np.where(mask, v, 0.0), inside


def nearest_input_view(target: Camera, inputs: list[Camera], lam: float) -> int:
    """Index of the input view closest to target.

    Distance = center distance + lam * rotation geodesic angle; lam carries
    units of scene length per radian (scene_radius / pi pairs the two terms).
    Ties break toward the lowest index.
    """
    if not inputs:
        raise ValueError("inputs must be nonempty")
    tc = target.center()
    best, best_d = 0, np.inf
    for i, cam in enumerate(inputs):
        d = float(np.linalg.norm(tc - cam.center())) + lam * quat.geodesic_angle(target.rotation, cam.rotation)
        if d < best_d - 1e-15:
            best, best_d = i, d
    return best


def forward_project(
    p: np.ndarray, depth: np.ndarray, cam_guid: Camera, cam_inp: Camera
) -> tuple[np.ndarray, np.ndarray]:
    """Map guidance pixels p (..., 2) with depths into the input view.

    Returns (q (..., 2), src_depth (...,)); src_depth <= 0 signals a point
    behind the input camera (q is meaningless there).
    """
    world = cam_guid.unproject(p, depth)
    q, src_depth = cam_inp.project(world)
    return q, src_depth


def backward_project(
    q: np.ndarray, cam_inp: Camera, cam_guid: Camera, depth_inp: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic return map: input pixels q with input depths back to the guidance view."""
    return forward_project(q, depth_inp, cam_inp, cam_guid)


def _pixel_grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def build_guidance_image(
    cam_guid: Camera,
    cloud: GaussianCloud,
    input_image: np.ndarray,
    cam_inp: Camera,
    source_view: int = 0,
    guid_render: FrameSet | None = None,
) -> GuidanceFrame:
    """Inverse-warp the input image to the guidance pose through cloud depth.

    Pixels are valid when the cloud renders a surface there (alpha > 0.5),
    the warped point lies in front of the input camera, and the landing
    coordinate is inside the input image. The returned uncertainty is the
    validity placeholder (1 on invalid pixels); estimate_uncertainty
    replaces it with the full cyclic-consistency score.
    """
    if guid_render is None:
        guid_render = render(cloud, cam_guid)
    h, w = cam_guid.height, cam_guid.width
    grid = _pixel_grid(h, w)
    q, src_depth = forward_project(grid, guid_render.depth, cam_guid, cam_inp)
    color, inside = bilinear_sample(np.asarray(input_image, dtype=np.float64), q)
    valid = guid_render.valid & (src_depth > 0.0) & inside
    return GuidanceFrame(
        image=np.where(valid[..., None], color, 0.0),
        valid=valid,
        uncertainty=np.where(valid, 0.0, 1.0),
        source_view=source_view,
        warp_q=q,
        warp_src_depth=src_depth,
    )


def uncertainty_map(
    guid: GuidanceFrame,
    cam_guid: Camera,
    cam_inp: Camera,
    gs_render: np.ndarray,
    input_image: np.ndarray,
    input_render: FrameSet,
    params: UncertaintyParams,
) -> np.ndarray:
    """Cyclic-consistency uncertainty for every guidance pixel.

    gs_render is the cloud's color render at the guidance pose; the
    photometric residual compares it against the input color sampled at the
    warped coordinate q. The geometric residual runs q back through the
    input view's rendered depth. Invalid pixels score 1.
    """
    h, w = cam_guid.height, cam_guid.width
    if guid.warp_q is None:
        raise ValueError("guidance frame carries no warp intermediates")
    grid = _pixel_grid(h, w)
    q = guid.warp_q

    depth_inp, depth_inside = bilinear_sample(input_render.depth, q)
    alpha_inp, _ = bilinear_sample(input_render.alpha, q)
    p_back, back_depth = backward_project(q, cam_inp, cam_guid, depth_inp)
    geo_ok = guid.valid & depth_inside & (alpha_inp > 0.5) & (depth_inp > 0.0) & (back_depth > 0.0)

    geom = np.sum((grid - p_back) ** 2, axis=-1)
    color_inp, _ = bilinear_sample(np.asarray(input_image, dtype=np.float64), q)
    photo = np.sum((np.asarray(gs_render, dtype=np.float64) - color_inp) ** 2, axis=-1)

    u = 1.0 - np.exp(-geom / params.s1 - photo / params.s2)
    return np.where(geo_ok, u, 1.0)


def estimate_uncertainty(
    guid: GuidanceFrame,
    cam_guid: Camera,
    cloud: GaussianCloud,
    input_image: np.ndarray,
    cam_inp: Camera,
    params: UncertaintyParams,
    gs_render: FrameSet | None = None,
    input_render: FrameSet | None = None,
) -> GuidanceFrame:
    """Fill a guidance frame's uncertainty from renders of the current cloud."""
    if gs_render is None:
        gs_render = render(cloud, cam_guid)
    if input_render is None:
        input_render = render(cloud, cam_inp)
    u = uncertainty_map(guid, cam_guid, cam_inp, gs_render.color, input_image, input_render, params)
    guid.uncertainty = u
    return guid


def downsample_uncertainty(u: np.ndarray, latent_h: int, latent_w: int) -> np.ndarray:
    """Average-pool a full-resolution map to the latent resolution.

    Uses exact area weighting, so non-divisible sizes pool fractional rows
    and columns proportionally; output values stay within the input range.
    """
    h, w = u.shape
    return _area_weights(latent_h, h) @ u @ _area_weights(latent_w, w).T


def _area_weights(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic overlap weights of output cells."""
    step = n_in / n_out
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            weights[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    return weights / step
