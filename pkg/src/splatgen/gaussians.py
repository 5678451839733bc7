"""Anisotropic 3D Gaussian primitives stored as structure-of-arrays.

Scale and opacity are kept in unconstrained form (log / logit) so the
optimizer never needs projection steps. Colors are per-channel spherical
harmonics coefficients; degree 0 is the view-independent base color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quaternion as quat

SH_C0 = 0.28209479177387814


def sh_dim(degree: int) -> int:
    """Number of SH coefficients per color channel for a max degree."""
    if not 0 <= degree <= 3:
        raise ValueError("SH degree must be in 0..3")
    return (degree + 1) ** 2


def rgb_to_sh0(rgb: np.ndarray) -> np.ndarray:
    """Degree-0 coefficient reproducing rgb under the +0.5 color offset."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh0_to_rgb(sh0: np.ndarray) -> np.ndarray:
    return np.asarray(sh0, dtype=np.float64) * SH_C0 + 0.5


@dataclass(frozen=True)
class Gaussian:
    """A single primitive; see GaussianCloud for the batched form."""

    mean: np.ndarray  # (3,) scene units
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    log_scale: np.ndarray  # (3,) log scene units
    logit_opacity: float
    sh_coeffs: np.ndarray  # (n_coeffs, 3)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if abs(np.linalg.norm(r) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must be unit norm")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "log_scale", np.asarray(self.log_scale, dtype=np.float64))
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.ndim != 2 or sh.shape[1] != 3:
            raise ValueError("sh_coeffs must have shape (n_coeffs, 3)")
        object.__setattr__(self, "sh_coeffs", sh)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.logit_opacity)))


def covariance_of(g: Gaussian) -> np.ndarray:
    """World-space covariance R S Sᵀ Rᵀ with S = diag(exp(log_scale))."""
    r = quat.to_matrix(g.rotation)
    s2 = np.exp(2.0 * g.log_scale)
    return (r * s2) @ r.T


class GaussianCloud:
    """Contiguous arrays of Gaussian parameters.

    All per-field arrays share length ``count``. Instances are treated as
    immutable values; operations that change the set of primitives return
    a new cloud.
    """

    __slots__ = ("means", "rotations", "log_scales", "logit_opacities", "sh_coeffs")

    def __init__(self, means, rotations, log_scales, logit_opacities, sh_coeffs):
        self.means = np.ascontiguousarray(means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.logit_opacities = np.ascontiguousarray(logit_opacities, dtype=np.float64).reshape(n)
        sh = np.ascontiguousarray(sh_coeffs, dtype=np.float64)
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[2] != 3:
            raise ValueError("sh_coeffs must have shape (count, n_coeffs, 3)")
        self.sh_coeffs = sh

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(np.sqrt(self.sh_coeffs.shape[1])) - 1

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logit_opacities))

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i],
            rotation=quat.normalize(self.rotations[i]),
            log_scale=self.log_scales[i],
            logit_opacity=float(self.logit_opacities[i]),
            sh_coeffs=self.sh_coeffs[i],
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.logit_opacities.copy(),
            self.sh_coeffs.copy(),
        )

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(
            self.means[idx],
            self.rotations[idx],
            self.log_scales[idx],
            self.logit_opacities[idx],
            self.sh_coeffs[idx],
        )

    def covariances(self) -> np.ndarray:
        """(count, 3, 3) world covariances."""
        r = quat.to_matrix(self.rotations)
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", r, s2, r)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.means.min(axis=0), self.means.max(axis=0)

    def radius(self) -> float:
        """Radius of the bounding sphere around the mean centroid."""
        c = self.means.mean(axis=0)
        return float(np.linalg.norm(self.means - c, axis=1).max())

    @staticmethod
    def concatenate(a: "GaussianCloud", b: "GaussianCloud") -> "GaussianCloud":
        if a.sh_coeffs.shape[1] != b.sh_coeffs.shape[1]:
            raise ValueError("clouds must share SH degree")
        return GaussianCloud(
            np.concatenate([a.means, b.means]),
            np.concatenate([a.rotations, b.rotations]),
            np.concatenate([a.log_scales, b.log_scales]),
            np.concatenate([a.logit_opacities, b.logit_opacities]),
            np.concatenate([a.sh_coeffs, b.sh_coeffs]),
        )
