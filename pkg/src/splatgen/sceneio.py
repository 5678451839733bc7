"""On-disk formats: scene directories, depth rasters, PNG images, latents.

Scene directory layout (all field orders normative):
  cameras.txt     one line per camera:
                  "id fx fy cx cy w h qw qx qy qz tx ty tz"
  points.bin      u32 little-endian count, then per Gaussian the f32
                  fields mean(3) rotation(4) log_scale(3) logit_opacity(1)
                  sh_coeffs(K*3, coefficient-major); K is recovered from
                  the file size.
  images/<id>.png 8-bit sRGB renders/captures, linearized to float on load.
  depths/<id>.f32 optional ground-truth depth rasters.

Depth raster: 16-byte header (magic "DPTH", u32 width, u32 height, u32
reserved) followed by row-major little-endian f32.

Latent dump: 16-byte header of u32 N, C, H, W followed by little-endian
f32 data; used for per-step sampler debugging and oracle latent files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera
from .gaussians import GaussianCloud

DEPTH_MAGIC = b"DPTH"


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    """Linear [0,1] floats to sRGB-encoded [0,1] floats."""
    linear = np.clip(linear, 0.0, 1.0)
    return np.where(linear <= 0.0031308, 12.92 * linear, 1.055 * linear ** (1 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    encoded = np.clip(encoded, 0.0, 1.0)
    return np.where(encoded <= 0.04045, encoded / 12.92, ((encoded + 0.055) / 1.055) ** 2.4)


def save_png(path, image_linear: np.ndarray):
    """Write a linear-light float image as 8-bit sRGB PNG."""
    u8 = np.round(srgb_encode(np.asarray(image_linear)) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(str(path), format="PNG")


def load_png(path) -> np.ndarray:
    """Read an 8-bit sRGB PNG, returning linear floats in [0, 1]."""
    u8 = np.asarray(Image.open(str(path)).convert("RGB"), dtype=np.float64)
    return srgb_decode(u8 / 255.0)


def save_depth(path, depth: np.ndarray):
    depth = np.ascontiguousarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<III", w, h, 0))
        f.write(depth.tobytes())


def load_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DEPTH_MAGIC:
            raise ValueError(f"bad depth raster magic {magic!r}")
        w, h, _ = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(), dtype="<f4", count=h * w)
    return data.reshape(h, w).astype(np.float64)


def save_latent(path, latent: np.ndarray):
    latent = np.ascontiguousarray(latent, dtype="<f4")
    if latent.ndim != 4:
        raise ValueError("latent must be (N, C, H, W)")
    with open(path, "wb") as f:
        f.write(struct.pack("<IIII", *latent.shape))
        f.write(latent.tobytes())


def load_latent(path) -> np.ndarray:
    with open(path, "rb") as f:
        n, c, h, w = struct.unpack("<IIII", f.read(16))
        data = np.frombuffer(f.read(), dtype="<f4", count=n * c * h * w)
    return data.reshape(n, c, h, w).astype(np.float64)


def save_cameras(path, cameras: dict[int, Camera]):
    lines = []
    for cid in sorted(cameras):
        c = cameras[cid]
        q, t = c.rotation, c.translation
        nums = [c.fx, c.fy, c.cx, c.cy]
        fields = [str(cid)] + [format(v, ".17g") for v in nums] + [str(c.width), str(c.height)]
        fields += [format(v, ".17g") for v in (*q, *t)]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path, near: float = 0.05, far: float = 50.0) -> dict[int, Camera]:
    cameras = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 14:
            raise ValueError(f"camera line needs 14 fields, got {len(parts)}: {line!r}")
        cid = int(parts[0])
        fx, fy, cx, cy = map(float, parts[1:5])
        w, h = int(parts[5]), int(parts[6])
        qw, qx, qy, qz, tx, ty, tz = map(float, parts[7:14])
        cameras[cid] = Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h,
                              rotation=np.array([qw, qx, qy, qz]),
                              translation=np.array([tx, ty, tz]), near=near, far=far)
    return cameras


def save_gaussians(path, cloud: GaussianCloud):
    n = cloud.count
    k = cloud.sh_coeffs.shape[1]
    rows = np.concatenate(
        [
            cloud.means,
            cloud.rotations,
            cloud.log_scales,
            cloud.logit_opacities[:, None],
            cloud.sh_coeffs.reshape(n, k * 3),
        ],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", n))
        f.write(np.ascontiguousarray(rows).tobytes())


def load_gaussians(path) -> GaussianCloud:
    with open(path, "rb") as f:
        (n,) = struct.unpack("<I", f.read(4))
        data = np.frombuffer(f.read(), dtype="<f4")
    if n == 0:
        raise ValueError("empty gaussian file")
    per = data.size // n
    if per * n != data.size:
        raise ValueError("gaussian file size does not divide by count")
    k3 = per - 11
    if k3 <= 0 or k3 % 3:
        raise ValueError("gaussian record size inconsistent with field layout")
    rows = data.reshape(n, per).astype(np.float64)
    from . import quaternion as quat

    return GaussianCloud(
        means=rows[:, 0:3],
        rotations=quat.normalize(rows[:, 3:7]),
        log_scales=rows[:, 7:10],
        logit_opacities=rows[:, 10],
        sh_coeffs=rows[:, 11:].reshape(n, k3 // 3, 3),
    )


def save_scene(
    scene_dir,
    cameras: dict[int, Camera],
    images: dict[int, np.ndarray] | None = None,
    cloud: GaussianCloud | None = None,
    depths: dict[int, np.ndarray] | None = None,
):
    d = Path(scene_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_cameras(d / "cameras.txt", cameras)
    if cloud is not None:
        save_gaussians(d / "points.bin", cloud)
    if images:
        (d / "images").mkdir(exist_ok=True)
        for cid, img in images.items():
            save_png(d / "images" / f"{cid}.png", img)
    if depths:
        (d / "depths").mkdir(exist_ok=True)
        for cid, depth in depths.items():
            save_depth(d / "depths" / f"{cid}.f32", depth)


class SceneData:
    """Loaded scene directory contents."""

    def __init__(self, cameras, images, cloud, depths):
        self.cameras: dict[int, Camera] = cameras
        self.images: dict[int, np.ndarray] = images
        self.cloud: GaussianCloud | None = cloud
        self.depths: dict[int, np.ndarray] = depths


def load_scene(scene_dir) -> SceneData:
    d = Path(scene_dir)
    if not (d / "cameras.txt").exists():
        raise FileNotFoundError(f"no cameras.txt under {d}")
    cameras = load_cameras(d / "cameras.txt")
    images = {}
    img_dir = d / "images"
    if img_dir.is_dir():
        for p in sorted(img_dir.glob("*.png")):
            images[int(p.stem)] = load_png(p)
    cloud = load_gaussians(d / "points.bin") if (d / "points.bin").exists() else None
    depths = {}
    dep_dir = d / "depths"
    if dep_dir.is_dir():
        for p in sorted(dep_dir.glob("*.f32")):
            depths[int(p.stem)] = load_depth(p)
    return SceneData(cameras, images, cloud, depths)
