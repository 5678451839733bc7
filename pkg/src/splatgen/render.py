"""Forward Gaussian splatting and analytic parameter gradients.

Projection follows the local-affine (EWA) approximation: a Gaussian with
world covariance S projects to a 2D Gaussian with covariance
``J W S Wᵀ Jᵀ + 0.3 I`` (J = projection Jacobian at the mean, W = camera
rotation, 0.3 px² anti-aliasing floor). Per pixel, contributions are
composited front to back:

    C = sum_i c_i a_i prod_{j<i} (1 - a_j),  a_i = opacity_i * weight_i

where weight_i is the 2D Gaussian density at the pixel, windowed to zero
beyond the 3-sigma footprint. The window rolls off smoothly between
sqrt(7) sigma and 3 sigma so the rendered image is C1 in every parameter;
a hard cutoff would make finite-difference checks of the analytic
gradients fail at footprint boundaries.

Depth uses the same compositing with the view depth in place of color and
is normalized by accumulated alpha, so an opaque surface reads its true
depth. Rendering is deterministic and pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels, sh
from . import quaternion as quat
from .camera import Camera
from .frames import DEPTH_VALID_ALPHA, FrameSet
from .gaussians import Gaussian, GaussianCloud

COV2D_FLOOR = 0.3  # px^2, added to the diagonal of every projected covariance
FOOTPRINT_MSQ = 9.0  # 3-sigma ellipse, in squared Mahalanobis units
WINDOW_MSQ = 7.0  # smooth roll-off starts here
DEFAULT_STOP_TRANSMITTANCE = 1e-6
ORACLE_LIMIT = 1000


@dataclass
class ProjectedGaussian:
    """One Gaussian after projection to a camera's image plane."""

    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) symmetric, pixels^2
    view_depth: float
    color: np.ndarray  # (3,)
    opacity: float


@dataclass
class _Projected:
    """Batch projection of the non-culled subset of a cloud."""

    idx: np.ndarray  # indices into the source cloud
    t: np.ndarray  # (K, 3) camera-frame means
    mean2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2)
    cov2d_inv: np.ndarray  # (K, 2, 2)
    depth: np.ndarray  # (K,)
    color: np.ndarray  # (K, 3)
    color_unclamped: np.ndarray  # (K, 3) pre-clamp values
    sh_basis: np.ndarray  # (K, n_coeffs)
    dirs: np.ndarray  # (K, 3) unit view directions, world frame
    dir_norm: np.ndarray  # (K,) |mean - camera center|
    opacity: np.ndarray  # (K,)
    order: np.ndarray  # permutation sorting by ascending depth
    rank: np.ndarray  # rank of each entry in that order
    bbox: np.ndarray  # (K, 4) x0, x1, y0, y1 inclusive pixel bounds

    @property
    def count(self) -> int:
        return self.idx.shape[0]


def _window(msq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smooth footprint window s(m^2) and its derivative ds/dm^2."""
    t = np.clip((FOOTPRINT_MSQ - msq) / (FOOTPRINT_MSQ - WINDOW_MSQ), 0.0, 1.0)
    s = t * t * (3.0 - 2.0 * t)
    ds = np.where((msq > WINDOW_MSQ) & (msq < FOOTPRINT_MSQ),
                  -6.0 * t * (1.0 - t) / (FOOTPRINT_MSQ - WINDOW_MSQ), 0.0)
    return s, ds


def project_cloud(cloud: GaussianCloud, cam: Camera) -> _Projected:
    """Project every Gaussian, dropping the culled ones.

    Culling: view depth <= near, or the 3-sigma footprint misses the image.
    """
    cam_r = quat.to_matrix(cam.rotation)
    t = cloud.means @ cam_r.T + cam.translation  # camera-frame means
    z = t[:, 2]
    # The local-affine projection is only meaningful when the entire
    # 3-sigma extent sits in front of the camera; grazing Gaussians
    # otherwise blow up into degenerate image-wide footprints.
    margin = 3.0 * np.exp(cloud.log_scales.max(axis=1))
    alive = z > cam.near + margin
    if not np.any(alive):
        return _empty_projected(cloud)

    idx = np.nonzero(alive)[0]
    t = t[idx]
    z = z[idx]
    mx = cam.fx * t[:, 0] / z + cam.cx
    my = cam.fy * t[:, 1] / z + cam.cy
    mean2d = np.stack([mx, my], axis=1)

    rot = quat.to_matrix(quat.normalize(cloud.rotations[idx]))
    s2 = np.exp(2.0 * cloud.log_scales[idx])
    sigma = np.einsum("nij,nj,nkj->nik", rot, s2, rot)
    m = cam_r @ sigma @ cam_r.T  # (K,3,3) camera-frame covariance

    invz = 1.0 / z
    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = cam.fx * invz
    jac[:, 1, 1] = cam.fy * invz
    jac[:, 0, 2] = -cam.fx * t[:, 0] * invz * invz
    jac[:, 1, 2] = -cam.fy * t[:, 1] * invz * invz
    cov2d = jac @ m @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = cov2d[:, 1, 1] / det
    inv[:, 1, 1] = cov2d[:, 0, 0] / det
    inv[:, 0, 1] = inv[:, 1, 0] = -cov2d[:, 0, 1] / det

    rx = 3.0 * np.sqrt(cov2d[:, 0, 0])
    ry = 3.0 * np.sqrt(cov2d[:, 1, 1])
    x0 = np.ceil(mx - rx).astype(np.int64)
    x1 = np.floor(mx + rx).astype(np.int64)
    y0 = np.ceil(my - ry).astype(np.int64)
    y1 = np.floor(my + ry).astype(np.int64)
    np.clip(x0, 0, cam.width - 1, out=x0)
    np.clip(x1, 0, cam.width - 1, out=x1)
    np.clip(y0, 0, cam.height - 1, out=y0)
    np.clip(y1, 0, cam.height - 1, out=y1)
    on_image = (
        (mx + rx >= 0.0) & (mx - rx <= cam.width - 1)
        & (my + ry >= 0.0) & (my - ry <= cam.height - 1)
    )
    keep = np.nonzero(on_image)[0]

    idx = idx[keep]
    t, z, mean2d = t[keep], z[keep], mean2d[keep]
    cov2d, inv = cov2d[keep], inv[keep]
    bbox = np.stack([x0[keep], x1[keep], y0[keep], y1[keep]], axis=1)

    center = cam.center()
    v = cloud.means[idx] - center
    dn = np.linalg.norm(v, axis=1)
    dirs = v / dn[:, None]
    color_raw, basis = sh.eval_colors(cloud.sh_coeffs[idx], dirs)
    color_unclamped = np.einsum("nk,nkc->nc", basis, cloud.sh_coeffs[idx]) + 0.5
    opacity = 1.0 / (1.0 + np.exp(-cloud.logit_opacities[idx]))

    order = np.argsort(z, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return _Projected(
        idx=idx, t=t, mean2d=mean2d, cov2d=cov2d, cov2d_inv=inv, depth=z,
        color=color_raw, color_unclamped=color_unclamped, sh_basis=basis,
        dirs=dirs, dir_norm=dn, opacity=opacity, order=order, rank=rank, bbox=bbox,
    )


def _empty_projected(cloud: GaussianCloud) -> _Projected:
    e = np.empty(0, dtype=np.int64)
    return _Projected(
        idx=e, t=np.empty((0, 3)), mean2d=np.empty((0, 2)), cov2d=np.empty((0, 2, 2)),
        cov2d_inv=np.empty((0, 2, 2)), depth=np.empty(0), color=np.empty((0, 3)),
        color_unclamped=np.empty((0, 3)), sh_basis=np.empty((0, cloud.sh_coeffs.shape[1])),
        dirs=np.empty((0, 3)), dir_norm=np.empty(0), opacity=np.empty(0),
        order=e.copy(), rank=e.copy(), bbox=np.empty((0, 4), dtype=np.int64),
    )


def project_gaussian(g: Gaussian, cam: Camera) -> ProjectedGaussian | None:
    """Project a single Gaussian; None when culled."""
    cloud = GaussianCloud(
        g.mean[None], g.rotation[None], g.log_scale[None],
        np.array([g.logit_opacity]), g.sh_coeffs[None],
    )
    p = project_cloud(cloud, cam)
    if p.count == 0:
        return None
    return ProjectedGaussian(
        mean2d=p.mean2d[0], cov2d=p.cov2d[0], view_depth=float(p.depth[0]),
        color=p.color[0], opacity=float(p.opacity[0]),
    )


@dataclass
class _PairCache:
    """Flat (pixel, Gaussian) contribution lists, sorted by pixel then depth."""

    gauss: np.ndarray  # (M,) index into the projected arrays
    pix: np.ndarray  # (M,) linear pixel index
    dx: np.ndarray
    dy: np.ndarray
    msq: np.ndarray
    weight: np.ndarray  # windowed Gaussian density
    alpha: np.ndarray  # opacity * weight, < 1
    transmittance: np.ndarray  # T before this contribution
    seg_start: np.ndarray  # (M,) bool, True at the first pair of each pixel run
    seg_id: np.ndarray  # (M,) index of the pixel run
    t_total: np.ndarray  # (H*W,) transmittance after all contributions


def _build_pairs(p: _Projected, cam: Camera, prune_transmittance: float = 0.0) -> _PairCache | None:
    """Rasterize footprints to flat (pixel, Gaussian) pairs sorted by
    pixel then depth, with per-pair transmittance.

    prune_transmittance > 0 drops pairs whose incoming transmittance is
    below the threshold after compositing order is known (a training-time
    cost cut; per-pixel error is bounded by the threshold).
    """
    hw = cam.height * cam.width
    if _kernels.HAVE_NUMBA:
        raw = _kernels.generate_pairs(
            p.bbox, np.ascontiguousarray(p.mean2d[:, 0]), np.ascontiguousarray(p.mean2d[:, 1]),
            np.ascontiguousarray(p.cov2d_inv[:, 0, 0]), np.ascontiguousarray(p.cov2d_inv[:, 0, 1]),
            np.ascontiguousarray(p.cov2d_inv[:, 1, 1]),
            p.opacity, p.rank, cam.width, max(p.count, 1),
        )
        g0, key, dx0, dy0, msq0, w0, al0 = raw
        if g0.size == 0:
            return None
        order = np.argsort(key)
        kept, pix, trans, seg_start, t_total = _kernels.scan_transmittance(
            order, key, al0, max(p.count, 1), hw, prune_transmittance)
        if kept.size == 0:
            return None
        gauss = np.take(g0, kept)
        dx = np.take(dx0, kept)
        dy = np.take(dy0, kept)
        msq = np.take(msq0, kept)
        weight = np.take(w0, kept)
        alpha = np.take(al0, kept)
        seg_id = np.cumsum(seg_start) - 1
        return _PairCache(
            gauss=gauss, pix=pix, dx=dx, dy=dy, msq=msq, weight=weight, alpha=alpha,
            transmittance=trans, seg_start=seg_start, seg_id=seg_id, t_total=t_total,
        )
    else:
        widths = p.bbox[:, 1] - p.bbox[:, 0] + 1
        heights = p.bbox[:, 3] - p.bbox[:, 2] + 1
        areas = widths * heights
        total = int(areas.sum())
        if total == 0:
            return None
        offsets = np.concatenate([[0], np.cumsum(areas)[:-1]])
        gauss = np.repeat(np.arange(p.count), areas)
        within = np.arange(total) - offsets[gauss]
        bw = widths[gauss]
        px = p.bbox[gauss, 0] + within % bw
        py = p.bbox[gauss, 2] + within // bw

        dx = px - p.mean2d[gauss, 0]
        dy = py - p.mean2d[gauss, 1]
        a = p.cov2d_inv[gauss, 0, 0]
        b = p.cov2d_inv[gauss, 0, 1]
        c = p.cov2d_inv[gauss, 1, 1]
        msq = (a * dx + 2.0 * b * dy) * dx + c * dy * dy
        sel = np.nonzero(msq < FOOTPRINT_MSQ)[0]
        if sel.size == 0:
            return None
        gauss = gauss[sel]
        pix = py[sel] * cam.width + px[sel]
        dx, dy, msq = dx[sel], dy[sel], msq[sel]

        s, _ = _window(msq)
        weight = np.exp(-0.5 * msq) * s
        alpha = p.opacity[gauss] * weight

        # Single integer key: pixel-major, depth rank minor.
        order = np.argsort(pix * np.int64(p.count) + p.rank[gauss])
        gauss, pix, dx, dy, msq, weight, alpha = (
            np.take(v, order) for v in (gauss, pix, dx, dy, msq, weight, alpha)
        )

        seg_start = np.empty(alpha.size, dtype=bool)
        seg_start[0] = True
        np.not_equal(pix[1:], pix[:-1], out=seg_start[1:])
        seg_id = np.cumsum(seg_start) - 1

        log1m = np.log1p(-alpha)
        csum = np.cumsum(log1m)
        prefix = csum - log1m  # exclusive within the full array
        seg_first = np.nonzero(seg_start)[0]
        trans = np.exp(prefix - prefix[seg_first][seg_id])

        t_total = np.ones(hw)
        seg_last = np.concatenate([seg_first[1:] - 1, [alpha.size - 1]])
        t_total[pix[seg_first]] = np.exp(csum[seg_last] - prefix[seg_first])

    if prune_transmittance > 0.0:
        keep = np.nonzero(trans >= prune_transmittance)[0]
        if keep.size == 0:
            return None
        if keep.size < alpha.size:
            gauss, pix, dx, dy, msq, weight, alpha, trans = (
                np.take(v, keep) for v in (gauss, pix, dx, dy, msq, weight, alpha, trans)
            )
            seg_start = np.empty(alpha.size, dtype=bool)
            seg_start[0] = True
            np.not_equal(pix[1:], pix[:-1], out=seg_start[1:])
            seg_id = np.cumsum(seg_start) - 1
    return _PairCache(
        gauss=gauss, pix=pix, dx=dx, dy=dy, msq=msq, weight=weight, alpha=alpha,
        transmittance=trans, seg_start=seg_start, seg_id=seg_id, t_total=t_total,
    )


def _composite(p: _Projected, pairs: _PairCache | None, cam: Camera, background,
               stop_transmittance: float) -> FrameSet:
    hw = cam.height * cam.width
    bg = np.asarray(background, dtype=np.float64)
    color = np.zeros((hw, 3))
    depth_raw = np.zeros(hw)
    acc = np.zeros(hw)
    if pairs is not None:
        contrib = pairs.alpha * pairs.transmittance
        if stop_transmittance > 0.0:
            contrib = np.where(pairs.transmittance < stop_transmittance, 0.0, contrib)
        for ch in range(3):
            color[:, ch] = np.bincount(pairs.pix, weights=contrib * p.color[pairs.gauss, ch], minlength=hw)
        depth_raw = np.bincount(pairs.pix, weights=contrib * p.depth[pairs.gauss], minlength=hw)
        acc = np.bincount(pairs.pix, weights=contrib, minlength=hw)
        color += bg[None, :] * pairs.t_total[:, None]
    else:
        color += bg[None, :]
    depth = np.divide(depth_raw, acc, out=np.zeros_like(depth_raw), where=acc > 1e-12)
    shape = (cam.height, cam.width)
    alpha = acc.reshape(shape)
    return FrameSet(
        color=color.reshape(shape + (3,)),
        depth=depth.reshape(shape),
        alpha=alpha,
        valid=alpha > DEPTH_VALID_ALPHA,
    )


def render(
    cloud: GaussianCloud,
    cam: Camera,
    mode: str = "both",
    background=(0.0, 0.0, 0.0),
    stop_transmittance: float = DEFAULT_STOP_TRANSMITTANCE,
) -> FrameSet:
    """Render color and/or depth by depth-sorted alpha compositing.

    Contributions are dropped once a pixel's transmittance falls below
    ``stop_transmittance`` (a cost/accuracy knob; the residual error it
    introduces is bounded by the threshold itself, and the default keeps
    it an order of magnitude below the renderer's 1e-5 oracle-equivalence
    budget). Background is composited with the remaining transmittance.
    """
    if mode not in ("color", "depth", "both"):
        raise ValueError("mode must be color, depth, or both")
    if cloud.count == 0:
        raise ValueError("cloud is empty")
    p = project_cloud(cloud, cam)
    pairs = _build_pairs(p, cam)
    return _composite(p, pairs, cam, background, stop_transmittance)


def oracle_render(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0),
                  limit: int = ORACLE_LIMIT) -> FrameSet:
    """Reference renderer: dense per-pixel compositing, no early exit.

    Kept deliberately independent of the production path: per-Gaussian
    projection built from covariance_of, per-pixel evaluation against all
    Gaussians, and a literal front-to-back loop. Small clouds only.
    """
    from .gaussians import covariance_of

    if cloud.count > limit:
        raise ValueError(f"oracle_render is limited to {limit} Gaussians")
    cam_r = quat.to_matrix(cam.rotation)
    center = cam.center()

    pg = []
    for i in range(cloud.count):
        g = cloud[i]
        tc = cam_r @ g.mean + cam.translation
        if tc[2] <= cam.near + 3.0 * np.exp(g.log_scale.max()):
            continue
        z = tc[2]
        mean2d = np.array([cam.fx * tc[0] / z + cam.cx, cam.fy * tc[1] / z + cam.cy])
        jac = np.array([
            [cam.fx / z, 0.0, -cam.fx * tc[0] / z**2],
            [0.0, cam.fy / z, -cam.fy * tc[1] / z**2],
        ])
        v = jac @ cam_r @ covariance_of(g) @ cam_r.T @ jac.T + COV2D_FLOOR * np.eye(2)
        d = g.mean - center
        dirs = (d / np.linalg.norm(d))[None, :]
        col = sh.eval_colors(g.sh_coeffs[None], dirs)[0][0]
        pg.append((z, mean2d, np.linalg.inv(v), col, g.opacity))
    pg.sort(key=lambda e: e[0])

    bg = np.asarray(background, dtype=np.float64)
    h, w = cam.height, cam.width
    color = np.zeros((h, w, 3))
    depth_raw = np.zeros((h, w))
    acc = np.zeros((h, w))
    if pg:
        zs = np.array([e[0] for e in pg])
        m2d = np.array([e[1] for e in pg])
        vinv = np.array([e[2] for e in pg])
        cols = np.array([e[3] for e in pg])
        ops = np.array([e[4] for e in pg])
        for row in range(h):
            for colx in range(w):
                dx = colx - m2d[:, 0]
                dy = row - m2d[:, 1]
                msq = vinv[:, 0, 0] * dx**2 + 2 * vinv[:, 0, 1] * dx * dy + vinv[:, 1, 1] * dy**2
                s, _ = _window(msq)
                aval = np.where(msq < FOOTPRINT_MSQ, ops * np.exp(-0.5 * msq) * s, 0.0)
                t = 1.0
                csum = np.zeros(3)
                dsum = 0.0
                asum = 0.0
                for k in range(aval.size):
                    ak = aval[k]
                    if ak == 0.0:
                        continue
                    csum += cols[k] * ak * t
                    dsum += zs[k] * ak * t
                    asum += ak * t
                    t *= 1.0 - ak
                color[row, colx] = csum + bg * t
                depth_raw[row, colx] = dsum
                acc[row, colx] = asum
    else:
        color[:] = bg
    depth = np.divide(depth_raw, acc, out=np.zeros_like(depth_raw), where=acc > 1e-12)
    return FrameSet(color=color, depth=depth, alpha=acc, valid=acc > DEPTH_VALID_ALPHA)


@dataclass
class CloudGradients:
    """Per-parameter loss gradients, aligned with the source cloud arrays."""

    means: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4), for the unit quaternion storage
    log_scales: np.ndarray  # (N, 3)
    logit_opacities: np.ndarray  # (N,)
    sh_coeffs: np.ndarray  # (N, K, 3)
    mean2d: np.ndarray  # (N, 2) image-plane position gradient, pixel units
    visible: np.ndarray  # (N,) bool, True when the Gaussian touched any pixel

    @staticmethod
    def zeros(cloud: GaussianCloud) -> "CloudGradients":
        return CloudGradients(
            np.zeros_like(cloud.means),
            np.zeros_like(cloud.rotations),
            np.zeros_like(cloud.log_scales),
            np.zeros_like(cloud.logit_opacities),
            np.zeros_like(cloud.sh_coeffs),
            np.zeros((cloud.count, 2)),
            np.zeros(cloud.count, dtype=bool),
        )

    def add_(self, other: "CloudGradients") -> "CloudGradients":
        self.means += other.means
        self.rotations += other.rotations
        self.log_scales += other.log_scales
        self.logit_opacities += other.logit_opacities
        self.sh_coeffs += other.sh_coeffs
        self.mean2d += other.mean2d
        self.visible |= other.visible
        return self


@dataclass
class RenderCache:
    """Forward-pass products needed to backpropagate image gradients."""

    cloud: GaussianCloud
    cam: Camera
    background: np.ndarray
    projected: _Projected
    pairs: _PairCache | None
    frame: FrameSet


def render_forward(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0),
                   prune_transmittance: float = 0.0) -> RenderCache:
    """Render keeping the pair cache for a later backward pass.

    With prune_transmittance > 0, occluded contributions below the
    threshold are dropped from the cache; forward and backward then
    consistently differentiate the same truncated compositing (a
    training-time economy, not used by the exact-render entry points).
    """
    p = project_cloud(cloud, cam)
    pairs = _build_pairs(p, cam, prune_transmittance=prune_transmittance)
    frame = _composite(p, pairs, cam, background, stop_transmittance=0.0)
    return RenderCache(cloud=cloud, cam=cam, background=np.asarray(background, dtype=np.float64),
                       projected=p, pairs=pairs, frame=frame)


def _rotation_matrix_grad(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions: (K, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    g = np.empty((q.shape[0], 4, 3, 3))
    g[:, 0] = 2.0 * np.stack([
        np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)
    ], -2)
    g[:, 1] = 2.0 * np.stack([
        np.stack([o, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)
    ], -2)
    g[:, 2] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], -1), np.stack([x, o, z], -1), np.stack([-w, z, -2 * y], -1)
    ], -2)
    g[:, 3] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, o], -1)
    ], -2)
    return g


def render_with_gradients(
    cloud: GaussianCloud,
    cam: Camera,
    loss_grad: np.ndarray,
    depth_grad: np.ndarray | None = None,
    alpha_grad: np.ndarray | None = None,
    background=(0.0, 0.0, 0.0),
) -> tuple[FrameSet, CloudGradients]:
    """Render and backpropagate image-space gradients to cloud parameters.

    loss_grad is dL/d(color) of shape (H, W, 3); depth_grad and alpha_grad
    optionally supply dL/d(depth) and dL/d(alpha). The forward pass here
    applies no transmittance early-exit so the returned gradients are
    exact derivatives of the returned FrameSet. Quaternion gradients are
    reported for the raw stored values, with normalization handled inside
    projection (the tangent projection I - qqᵀ is applied).
    """
    cache = render_forward(cloud, cam, background)
    return cache.frame, render_backward(cache, loss_grad, depth_grad, alpha_grad)


def render_backward(
    cache: RenderCache,
    loss_grad: np.ndarray,
    depth_grad: np.ndarray | None = None,
    alpha_grad: np.ndarray | None = None,
) -> CloudGradients:
    """Backpropagate image-space gradients through a cached forward pass."""
    if not np.all(np.isfinite(loss_grad)):
        raise ValueError("loss_grad must be finite")
    cloud, cam = cache.cloud, cache.cam
    p, pairs, frame = cache.projected, cache.pairs, cache.frame
    grads = CloudGradients.zeros(cloud)
    if pairs is None or p.count == 0:
        return grads

    hw = cam.height * cam.width
    g_c = np.asarray(loss_grad, dtype=np.float64).reshape(hw, 3)
    bg = cache.background

    acc = frame.alpha.reshape(hw)
    depth_raw = frame.depth.reshape(hw) * acc
    g_zpix = np.zeros(hw)
    g_apix = np.zeros(hw) if alpha_grad is None else np.asarray(alpha_grad, dtype=np.float64).reshape(hw).copy()
    if depth_grad is not None:
        gd = np.asarray(depth_grad, dtype=np.float64).reshape(hw)
        ok = acc > 1e-12
        g_zpix[ok] = gd[ok] / acc[ok]
        g_apix[ok] -= gd[ok] * depth_raw[ok] / (acc[ok] * acc[ok])

    gauss = pairs.gauss
    pix = pairs.pix
    # Per-pair upstream value for d/d(alpha_hat): color, depth and alpha terms.
    val = (
        np.einsum("mc,mc->m", g_c[pix], p.color[gauss])
        + g_zpix[pix] * p.depth[gauss]
        + g_apix[pix]
    )
    if _kernels.HAVE_NUMBA:
        bg_pix = (g_c @ bg) * pairs.t_total
        d_alpha_hat = _kernels.backward_scan(pix, pairs.alpha, pairs.transmittance, val, bg_pix)
    else:
        contrib = val * pairs.alpha * pairs.transmittance
        csum = np.cumsum(contrib)
        seg_first = np.nonzero(pairs.seg_start)[0]
        seg_last = np.concatenate([seg_first[1:] - 1, [contrib.size - 1]])
        seg_offset = (csum[seg_first] - contrib[seg_first])[pairs.seg_id]  # cumsum before this pixel run
        seg_before = (csum - contrib) - seg_offset
        seg_total = csum[seg_last][pairs.seg_id] - seg_offset
        suffix = seg_total - seg_before - contrib  # sum over later pairs in the pixel
        bg_term = (g_c[pix] @ bg) * pairs.t_total[pix]
        d_alpha_hat = val * pairs.transmittance - (suffix + bg_term) / (1.0 - pairs.alpha)

    k = p.count
    w_pair = pairs.alpha * pairs.transmittance
    d_color = np.stack(
        [np.bincount(gauss, weights=g_c[pix, ch] * w_pair, minlength=k) for ch in range(3)],
        axis=1,
    )
    d_viewz = np.bincount(gauss, weights=g_zpix[pix] * w_pair, minlength=k)
    d_opacity = np.bincount(gauss, weights=d_alpha_hat * pairs.weight, minlength=k)

    s, ds = _window(pairs.msq)
    d_weight = d_alpha_hat * p.opacity[gauss]
    d_msq = d_weight * np.exp(-0.5 * pairs.msq) * (-0.5 * s + ds)

    a = p.cov2d_inv[gauss, 0, 0]
    b = p.cov2d_inv[gauss, 0, 1]
    c = p.cov2d_inv[gauss, 1, 1]
    d_m2x = np.bincount(gauss, weights=d_msq * (-2.0) * (a * pairs.dx + b * pairs.dy), minlength=k)
    d_m2y = np.bincount(gauss, weights=d_msq * (-2.0) * (b * pairs.dx + c * pairs.dy), minlength=k)
    d_vinv = np.empty((k, 2, 2))
    d_vinv[:, 0, 0] = np.bincount(gauss, weights=d_msq * pairs.dx * pairs.dx, minlength=k)
    d_vinv[:, 1, 1] = np.bincount(gauss, weights=d_msq * pairs.dy * pairs.dy, minlength=k)
    xy = np.bincount(gauss, weights=d_msq * pairs.dx * pairs.dy, minlength=k)
    d_vinv[:, 0, 1] = d_vinv[:, 1, 0] = xy
    d_v = -p.cov2d_inv @ d_vinv @ p.cov2d_inv

    # Recompute the camera-frame projection intermediates for the chain rule.
    cam_r = quat.to_matrix(cam.rotation)
    t = p.t
    z = p.depth
    invz = 1.0 / z
    jac = np.zeros((k, 2, 3))
    jac[:, 0, 0] = cam.fx * invz
    jac[:, 1, 1] = cam.fy * invz
    jac[:, 0, 2] = -cam.fx * t[:, 0] * invz**2
    jac[:, 1, 2] = -cam.fy * t[:, 1] * invz**2
    q_unit = quat.normalize(cloud.rotations[p.idx])
    rot = quat.to_matrix(q_unit)
    s2 = np.exp(2.0 * cloud.log_scales[p.idx])
    sigma = np.einsum("nij,nj,nkj->nik", rot, s2, rot)
    m_cam = cam_r @ sigma @ cam_r.T

    d_jac = (d_v + np.swapaxes(d_v, 1, 2)) @ jac @ m_cam
    d_mcam = np.swapaxes(jac, 1, 2) @ d_v @ jac
    d_sigma = cam_r.T @ d_mcam @ cam_r

    d_logscale = 2.0 * s2 * np.einsum("nji,njk,nki->ni", rot, d_sigma, rot)
    d_rotmat = (d_sigma + np.swapaxes(d_sigma, 1, 2)) @ (rot * s2[:, None, :])
    dr_dq = _rotation_matrix_grad(q_unit)
    d_qhat = np.einsum("nqij,nij->nq", dr_dq, d_rotmat)
    d_q = d_qhat - q_unit * np.einsum("nq,nq->n", d_qhat, q_unit)[:, None]

    d_t = np.zeros((k, 3))
    d_t[:, 0] = d_m2x * cam.fx * invz + d_jac[:, 0, 2] * (-cam.fx * invz**2)
    d_t[:, 1] = d_m2y * cam.fy * invz + d_jac[:, 1, 2] * (-cam.fy * invz**2)
    d_t[:, 2] = (
        -d_m2x * cam.fx * t[:, 0] * invz**2
        - d_m2y * cam.fy * t[:, 1] * invz**2
        + d_jac[:, 0, 0] * (-cam.fx * invz**2)
        + d_jac[:, 1, 1] * (-cam.fy * invz**2)
        + d_jac[:, 0, 2] * (2.0 * cam.fx * t[:, 0] * invz**3)
        + d_jac[:, 1, 2] * (2.0 * cam.fy * t[:, 1] * invz**3)
        + d_viewz
    )
    d_mean = d_t @ cam_r

    # Color path: clamp mask, SH coefficients, and view-direction chain.
    clamp_open = p.color_unclamped > 0.0
    d_col_eff = np.where(clamp_open, d_color, 0.0)
    d_sh = p.sh_basis[:, :, None] * d_col_eff[:, None, :]
    if cloud.sh_degree >= 1:
        degree = cloud.sh_degree
        bgrad = sh.basis_grad(degree, p.dirs)
        d_dir = np.einsum("nc,nkc,nkd->nd", d_col_eff, cloud.sh_coeffs[p.idx], bgrad)
        proj = d_dir - p.dirs * np.einsum("nd,nd->n", d_dir, p.dirs)[:, None]
        d_mean += proj / p.dir_norm[:, None]

    op = p.opacity
    # p.idx holds unique cloud indices, so plain fancy-index adds suffice.
    grads.means[p.idx] += d_mean
    grads.rotations[p.idx] += d_q
    grads.log_scales[p.idx] += d_logscale
    grads.logit_opacities[p.idx] += d_opacity * op * (1.0 - op)
    grads.sh_coeffs[p.idx] += d_sh
    grads.mean2d[p.idx] += np.stack([d_m2x, d_m2y], axis=1)
    touched = np.zeros(p.count, dtype=bool)
    touched[gauss] = True
    grads.visible[p.idx[touched]] = True
    return grads
