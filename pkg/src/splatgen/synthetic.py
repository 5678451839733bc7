"""Seeded synthetic scenes for tests, demos, and desk-scale experiments.

Every generator is deterministic for a fixed seed. Scenes are sized so a
64x64 render of 100 primitives covers well over 30% of the frame from any
camera of the requested layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quaternion as quat
from .camera import Camera, look_at
from .gaussians import GaussianCloud, rgb_to_sh0, sh_dim

LAYOUTS = ("orbit", "forward_facing", "walkthrough")


@dataclass
class SyntheticScene:
    """A ground-truth Gaussian cloud plus a camera rig around it."""

    cloud: GaussianCloud
    cameras: list[Camera]
    renders: list | None = None  # optional cached FrameSets, same order as cameras

    def render_ground_truth(self, background=(0.0, 0.0, 0.0)) -> list:
        """Render (and cache) every camera with the production renderer."""
        from .render import render

        if self.renders is None:
            self.renders = [render(self.cloud, cam, background=background) for cam in self.cameras]
        return self.renders


def _cloud_from_parts(rng: np.ndarray, means, scales, colors, opacity_logits, sh_degree: int) -> GaussianCloud:
    n = means.shape[0]
    sh = np.zeros((n, sh_dim(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    return GaussianCloud(
        means=means,
        rotations=quat.random_unit(rng, n),
        log_scales=np.log(scales),
        logit_opacities=opacity_logits,
        sh_coeffs=sh,
    )


def _default_camera(rotation, translation, size: int, focal: float | None = None) -> Camera:
    f = focal if focal is not None else float(size)
    c = (size - 1) / 2.0
    return Camera(
        fx=f, fy=f, cx=c, cy=c, width=size, height=size,
        rotation=rotation, translation=translation, near=0.05, far=50.0,
    )


def generate_synthetic_scene(
    seed: int,
    n_gaussians: int,
    n_cameras: int,
    layout: str,
    image_size: int = 64,
    sh_degree: int = 1,
) -> SyntheticScene:
    """Random blob cloud in a unit-scale box with a camera rig.

    Layouts:
        orbit: camera centers on a circle, all looking at the origin.
        forward_facing: a lateral fan of nearly parallel cameras.
        walkthrough: a path advancing through the scene with gentle turns.
    """
    if n_gaussians < 1:
        raise ValueError("n_gaussians must be >= 1")
    if layout not in LAYOUTS:
        raise ValueError(f"layout must be one of {LAYOUTS}")
    rng = np.random.default_rng(seed)

    means = rng.uniform(-0.5, 0.5, size=(n_gaussians, 3))
    scales = np.exp(rng.uniform(np.log(0.04), np.log(0.11), size=(n_gaussians, 3)))
    colors = rng.uniform(0.08, 0.92, size=(n_gaussians, 3))
    logits = rng.uniform(0.5, 3.0, size=n_gaussians)
    cloud = _cloud_from_parts(rng, means, scales, colors, logits, sh_degree)
    if sh_degree >= 1:
        cloud.sh_coeffs[:, 1:4, :] = rng.normal(0.0, 0.05, size=(n_gaussians, 3, 3))

    cameras = []
    if layout == "orbit":
        radius, height = 1.5, 0.45
        for k in range(n_cameras):
            ang = 2.0 * np.pi * k / n_cameras
            eye = np.array([radius * np.cos(ang), height, radius * np.sin(ang)])
            pose = look_at(eye, np.zeros(3))
            cameras.append(_default_camera(pose.rotation, pose.translation, image_size))
    elif layout == "forward_facing":
        span = 0.5
        for k in range(n_cameras):
            u = 0.5 if n_cameras == 1 else k / (n_cameras - 1)
            x = (u - 0.5) * 2.0 * span
            eye = np.array([x, 0.08 * np.sin(3.0 * u), -1.55])
            pose = look_at(eye, np.array([0.3 * x, 0.0, 0.0]))
            cameras.append(_default_camera(pose.rotation, pose.translation, image_size))
    else:  # walkthrough
        for k in range(n_cameras):
            u = 0.5 if n_cameras == 1 else k / (n_cameras - 1)
            eye = np.array([0.55 * np.sin(np.pi * (u - 0.5)), 0.1, -1.9 + 1.0 * u])
            target = np.array([0.25 * np.sin(np.pi * (u - 0.5)), 0.0, eye[2] + 2.0])
            pose = look_at(eye, target)
            cameras.append(_default_camera(pose.rotation, pose.translation, image_size))
    return SyntheticScene(cloud=cloud, cameras=cameras)


def _smooth_texture(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Low-frequency RGB texture over surface coordinates, values in (0.1, 0.9)."""
    r = 0.5 + 0.32 * np.sin(1.2 * x) * np.cos(0.9 * y)
    g = 0.5 + 0.32 * np.sin(0.7 * x + 0.9) * np.sin(1.3 * y + 0.4)
    b = 0.5 + 0.32 * np.cos(1.0 * x - 0.5) * np.cos(0.6 * y - 1.0)
    return np.stack([r, g, b], axis=-1)


def wall_arc_cloud(
    radius: float = 2.2,
    angle_range: tuple[float, float] = (-1.65, 1.65),
    y_range: tuple[float, float] = (-0.8, 0.8),
    spacing: float = 0.08,
    scale: float = 0.055,
    opacity_logit: float = 6.0,
    seed: int = 0,
) -> GaussianCloud:
    """Dense cylindrical wall of Gaussians around the origin.

    The wall renders with near-unit accumulated opacity and smooth depth,
    which makes warped guidance images reproducible to sub-pixel accuracy.
    """
    rng = np.random.default_rng(seed)
    n_ang = max(2, int(np.ceil((angle_range[1] - angle_range[0]) * radius / spacing)) + 1)
    n_y = max(2, int(np.ceil((y_range[1] - y_range[0]) / spacing)) + 1)
    ang = np.linspace(angle_range[0], angle_range[1], n_ang)
    ys = np.linspace(y_range[0], y_range[1], n_y)
    aa, yy = np.meshgrid(ang, ys, indexing="ij")
    # Jitter breaks the exact depth ties of a regular grid; without it the
    # compositing order of coplanar splats flips under infinitesimal pose
    # changes and renders become discontinuous in the camera.
    aa = aa + rng.uniform(-0.45, 0.45, aa.shape) * spacing / radius
    yy = yy + rng.uniform(-0.45, 0.45, yy.shape) * spacing
    rr = radius + rng.uniform(-0.45, 0.45, aa.shape) * spacing
    means = np.stack([rr * np.sin(aa), yy, rr * np.cos(aa)], axis=-1).reshape(-1, 3)
    colors = _smooth_texture(aa * radius, yy * 2.5).reshape(-1, 3)
    n = means.shape[0]
    sh = np.zeros((n, sh_dim(0), 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    return GaussianCloud(
        means=means,
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        log_scales=np.full((n, 3), np.log(scale)),
        logit_opacities=np.full(n, opacity_logit),
        sh_coeffs=sh,
    )


def plane_patch_cloud(center, u_axis, v_axis, half_u: float, half_v: float,
                      spacing: float = 0.03, scale: float = 0.035,
                      color=(0.95, 0.25, 0.1), opacity_logit: float = 7.0) -> GaussianCloud:
    """Dense rectangular slab of Gaussians; renders a crisp opaque patch."""
    center = np.asarray(center, dtype=np.float64)
    u_axis = np.asarray(u_axis, dtype=np.float64)
    v_axis = np.asarray(v_axis, dtype=np.float64)
    nu = max(2, int(np.ceil(2 * half_u / spacing)) + 1)
    nv = max(2, int(np.ceil(2 * half_v / spacing)) + 1)
    us = np.linspace(-half_u, half_u, nu)
    vs = np.linspace(-half_v, half_v, nv)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    means = center + uu[..., None] * u_axis + vv[..., None] * v_axis
    means = means.reshape(-1, 3)
    n = means.shape[0]
    sh = np.zeros((n, sh_dim(0), 3))
    sh[:, 0, :] = rgb_to_sh0(np.asarray(color, dtype=np.float64))
    return GaussianCloud(
        means=means,
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        log_scales=np.full((n, 3), np.log(scale)),
        logit_opacities=np.full(n, opacity_logit),
        sh_coeffs=sh,
    )


def blob_cluster(
    center, extent, n: int, seed: int, scale_range=(0.05, 0.12), opacity_range=(1.5, 4.0)
) -> GaussianCloud:
    """Cluster of random opaque blobs, used as foreground props and occluders."""
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=np.float64)
    extent = np.asarray(extent, dtype=np.float64)
    means = center + rng.uniform(-0.5, 0.5, size=(n, 3)) * extent
    scales = np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), size=(n, 3)))
    colors = rng.uniform(0.1, 0.9, size=(n, 3))
    logits = rng.uniform(opacity_range[0], opacity_range[1], size=n)
    return _cloud_from_parts(rng, means, scales, colors, logits, sh_degree=0)


def panning_walkthrough_scene(
    n_inputs: int = 3,
    n_between: int = 3,
    image_size: int = 48,
    yaw_span: float = 2.0943951023931953,  # 120 degrees end to end
    n_props: int = 110,
    seed: int = 7,
) -> tuple[SyntheticScene, list[int]]:
    """Arc-wall scene with a panning camera path and held-out poses.

    The camera pans across ``yaw_span`` while translating slightly, so
    consecutive input frusta leave vertical wall strips that no input
    observes. Returns (scene, input_camera_indices); the remaining cameras
    are held-out evaluation poses between the inputs.
    """
    wall = wall_arc_cloud(angle_range=(-yaw_span / 2 - 0.65, yaw_span / 2 + 0.65), seed=seed)
    props = blob_cluster(center=(0.0, 0.0, 0.0), extent=(2.3, 1.1, 2.3), n=n_props, seed=seed + 1)
    keep = np.linalg.norm(props.means[:, [0, 2]], axis=1) > 0.75
    props = props.subset(keep)
    cloud = GaussianCloud.concatenate(wall, props)

    total = (n_inputs - 1) * (n_between + 1) + 1
    cameras = []
    input_ids = []
    for k in range(total):
        u = k / (total - 1)
        yaw = (u - 0.5) * yaw_span
        eye = np.array([0.35 * np.sin(yaw), 0.06 * np.sin(2.4 * u), 0.12 * u - 0.06])
        target = eye + np.array([np.sin(yaw), 0.0, np.cos(yaw)])
        pose = look_at(eye, target)
        cameras.append(_default_camera(pose.rotation, pose.translation, image_size))
        if k % (n_between + 1) == 0:
            input_ids.append(k)
    return SyntheticScene(cloud=cloud, cameras=cameras), input_ids


def occluder_pair_scene(image_size: int = 64, with_occluder: bool = True,
                        nested: bool = False, seed: int = 3):
    """Textured-wall scene for warp and cyclic-consistency tests.

    Returns (scene, input_index, guidance_index). With ``nested`` the
    guidance camera sits slightly forward of the input so its frustum
    footprint on the wall lies strictly inside the input's: every warp
    lands in-frame and the pair is consistent everywhere. Otherwise the
    guidance camera is laterally offset, which (with the occluder) hides a
    wall band from the input view.
    """
    wall = wall_arc_cloud(radius=2.4, angle_range=(-0.95, 0.95), y_range=(-1.55, 1.55),
                          spacing=0.06, scale=0.055, seed=seed)
    parts = wall
    if with_occluder:
        occ = plane_patch_cloud(
            center=(0.22, 0.05, 0.85), u_axis=(1.0, 0.0, 0.0), v_axis=(0.0, 1.0, 0.0),
            half_u=0.15, half_v=0.16,
        )
        parts = GaussianCloud.concatenate(wall, occ)

    eyes = [
        np.array([-0.02, 0.0, -0.32]),  # input
        np.array([0.028, 0.012, -0.17]),  # nested guidance target
        np.array([0.14, 0.02, -0.27]),  # lateral guidance target
    ]
    cams = []
    for eye in eyes:
        pose = look_at(eye, np.array([0.0, 0.0, 2.4]))
        cams.append(_default_camera(pose.rotation, pose.translation, image_size))
    return SyntheticScene(cloud=parts, cameras=cams), 0, (1 if nested else 2)
