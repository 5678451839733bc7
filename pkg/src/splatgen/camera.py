"""Pinhole cameras and rigid pose algebra.

Pose convention: world-to-camera throughout. A world point X maps to
camera coordinates as ``X_cam = R @ X + t`` where R is the rotation matrix
of ``rotation`` and t is ``translation``. Pixel coordinates are continuous
with the center of pixel (row, col) at (x=col, y=row).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import quaternion as quat


@dataclass(frozen=True)
class RigidTransform:
    """Rotation-then-translation map ``p -> R p + t``."""

    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray  # (3,)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat.to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ quat.to_matrix(self.rotation).T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: ``p -> self(other(p))``."""
        r = quat.multiply(self.rotation, other.rotation)
        t = self.apply(other.translation)
        return RigidTransform(quat.normalize(r), t)

    def inverse(self) -> "RigidTransform":
        rc = quat.conjugate(self.rotation)
        return RigidTransform(rc, -quat.rotate(rc, self.translation))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera pose.

    Attributes:
        fx, fy: focal lengths in pixels (> 0).
        cx, cy: principal point in pixels.
        width, height: image size in pixels.
        rotation: unit quaternion (w, x, y, z) of the world-to-camera rotation.
        translation: world-to-camera translation, scene units.
        near, far: clip depths, 0 < near < far.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        r = np.asarray(self.rotation, dtype=np.float64)
        if abs(np.linalg.norm(r) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must be unit norm")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform(self.rotation, self.translation)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -quat.rotate(quat.conjugate(self.rotation), self.translation)

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return self.pose.apply(points)

    def project(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns (pixels (..., 2), depths (...,))."""
        pc = self.world_to_cam(points_world)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def unproject(self, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """World points of pixels (..., 2) at the given camera-frame depths."""
        pixels = np.asarray(pixels, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (pixels[..., 0] - self.cx) / self.fx * depth
        y = (pixels[..., 1] - self.cy) / self.fy * depth
        pc = np.stack([x, y, depth], axis=-1)
        return self.pose.inverse().apply(pc)

    def with_pose(self, rotation: np.ndarray, translation: np.ndarray) -> "Camera":
        return replace(self, rotation=quat.normalize(rotation), translation=np.asarray(translation, dtype=np.float64))


def pose_compose(a: RigidTransform, b_inverse: RigidTransform) -> RigidTransform:
    """Relative transform ``a ∘ b⁻¹`` mapping b's frame into a's frame."""
    return a.compose(b_inverse)


def relative_transform(a: Camera | RigidTransform, b: Camera | RigidTransform) -> RigidTransform:
    """Transform taking b-camera coordinates to a-camera coordinates."""
    pa = a.pose if isinstance(a, Camera) else a
    pb = b.pose if isinstance(b, Camera) else b
    return pose_compose(pa, pb.inverse())


def pose_interpolate(a: Camera, b: Camera, u: float) -> Camera:
    """Camera at fraction u of the trajectory from a to b.

    Rotation follows shortest-arc slerp; the camera center moves linearly.
    Endpoints are exact: u=0 gives a, u=1 gives b. Intrinsics must match.
    """
    if not (0.0 <= u <= 1.0):
        raise ValueError("u must lie in [0, 1]")
    for f in ("fx", "fy", "cx", "cy", "width", "height"):
        if getattr(a, f) != getattr(b, f):
            raise ValueError(f"cameras must share intrinsics (mismatch in {f})")
    if u == 0.0:
        return a
    if u == 1.0:
        return b
    r = quat.slerp(a.rotation, b.rotation, u)
    center = (1.0 - u) * a.center() + u * b.center()
    t = -quat.rotate(r, center)
    return a.with_pose(r, t)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    """World-to-camera pose with +z pointing from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        upv = np.array([0.0, 0.0, 1.0]) if abs(fwd[1]) > 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)  # rows: camera axes in world coords
    q = quat.from_matrix(rot)
    return RigidTransform(q, -quat.rotate(q, eye))
