"""Unit-quaternion algebra used for Gaussian orientations and camera poses.

Quaternions are stored as (w, x, y, z) numpy arrays. Functions accept a
single quaternion of shape (4,) or a batch of shape (N, 4); rotation
matrices are returned with matching leading dimensions.
"""

from __future__ import annotations

import numpy as np


def normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm."""
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion; the input is normalized first."""
    q = normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.stack(
        [
            1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
            2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
            2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def from_matrix(m: np.ndarray) -> np.ndarray:
    """Quaternion (w >= 0) of a single 3x3 rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(m[i, i] - m[j, j] - m[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return normalize(q)


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by quaternion q."""
    return v @ to_matrix(q).T if np.asarray(q).ndim == 1 else np.einsum("...ij,...j->...i", to_matrix(q), v)


def slerp(a: np.ndarray, b: np.ndarray, u: float) -> np.ndarray:
    """Shortest-arc spherical interpolation between unit quaternions.

    The sign of b is flipped when dot(a, b) < 0 so the arc is always the
    short one; after that alignment the antipodal case cannot occur. The
    endpoints are returned exactly for u = 0 and u = 1.
    """
    a = normalize(a)
    b = normalize(b)
    if u <= 0.0:
        return a.copy()
    if u >= 1.0:
        return b.copy()
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    dot = min(dot, 1.0)
    theta = np.arccos(dot)
    if theta < 1e-9:
        return normalize((1.0 - u) * a + u * b)
    s = np.sin(theta)
    return normalize((np.sin((1.0 - u) * theta) / s) * a + (np.sin(u * theta) / s) * b)


def geodesic_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Rotation angle in radians between the orientations a and b."""
    d = abs(float(np.dot(normalize(a), normalize(b))))
    return 2.0 * np.arccos(min(d, 1.0))


def random_unit(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniformly distributed unit quaternions (Shoemake's method)."""
    u = rng.random((3,) if n is None else (n, 3))
    u1, u2, u3 = u[..., 0], u[..., 1], u[..., 2]
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    q = np.stack(
        [
            a * np.sin(2.0 * np.pi * u2),
            a * np.cos(2.0 * np.pi * u2),
            b * np.sin(2.0 * np.pi * u3),
            b * np.cos(2.0 * np.pi * u3),
        ],
        axis=-1,
    )
    neg = q[..., 0] < 0
    q[neg] = -q[neg]
    return q
