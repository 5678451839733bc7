"""Differentiable image-space losses for the trainer.

Every loss returns (value, gradient w.r.t. the rendered quantity); the
renderer's backward pass then carries the image gradients to the Gaussian
parameters. The structural terms share one filtered-moment engine whose
adjoint is exact, so all gradients here pass central finite-difference
checks at 1e-3 relative error.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .frames import FrameSet
from .metrics import SSIM_C1, SSIM_C2, SSIM_WINDOW, gaussian_kernel

_KERNEL = gaussian_kernel()
_RADIUS = SSIM_WINDOW // 2


@dataclass
class LossWeights:
    """w1 L1 + w2 D-SSIM + w3 depth for inputs; w4 perceptual + w5 D-SSIM + w6 depth for pseudo views."""

    w1: float = 0.8
    w2: float = 0.2
    w3: float = 1.0
    w4: float = 1.0
    w5: float = 0.2
    w6: float = 1.0

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w4", "w5", "w6"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _filt(img: np.ndarray, kernel: np.ndarray = _KERNEL) -> np.ndarray:
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[_RADIUS:-_RADIUS, _RADIUS:-_RADIUS]


def _filt_adjoint(valid_field: np.ndarray, full_shape: tuple[int, int],
                  kernel: np.ndarray = _KERNEL) -> np.ndarray:
    """Adjoint of _filt: zero-embed the valid-region field, then correlate."""
    out = np.zeros(full_shape)
    out[_RADIUS:-_RADIUS, _RADIUS:-_RADIUS] = valid_field
    out = correlate1d(out, kernel, axis=0, mode="constant")
    return correlate1d(out, kernel, axis=1, mode="constant")


def l1_loss(render: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its (sub)gradient."""
    diff = render - target
    grad = np.sign(diff) / diff.size
    return float(np.abs(diff).mean()), grad


class _StructuralMoments:
    """Filtered moments of an image pair on the valid interior."""

    def __init__(self, a: np.ndarray, b: np.ndarray):
        self.shape = a.shape
        self.a, self.b = a, b
        self.mu_a, self.mu_b = _filt(a), _filt(b)
        self.m_aa, self.m_bb, self.m_ab = _filt(a * a), _filt(b * b), _filt(a * b)
        self.var_a = self.m_aa - self.mu_a**2
        self.var_b = self.m_bb - self.mu_b**2
        self.cov = self.m_ab - self.mu_a * self.mu_b

    def grad_to_image(self, d_mu_a, d_m_aa, d_m_ab) -> np.ndarray:
        """Chain per-moment gradients back to the first image."""
        return (
            _filt_adjoint(d_mu_a, self.shape)
            + 2.0 * self.a * _filt_adjoint(d_m_aa, self.shape)
            + self.b * _filt_adjoint(d_m_ab, self.shape)
        )


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM over the valid interior and gradient w.r.t. a."""
    mom = _StructuralMoments(a, b)
    a1 = 2 * mom.mu_a * mom.mu_b + SSIM_C1
    a2 = 2 * mom.cov + SSIM_C2
    b1 = mom.mu_a**2 + mom.mu_b**2 + SSIM_C1
    b2 = mom.var_a + mom.var_b + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    n = smap.size
    w = 1.0 / n
    d_mu_a = w * (2 * mom.mu_b * (a2 - a1) / (b1 * b2) - 2 * mom.mu_a * smap * (1 / b1 - 1 / b2))
    d_m_aa = w * (-smap / b2)
    d_m_ab = w * (2 * a1 / (b1 * b2))
    return float(smap.mean()), mom.grad_to_image(d_mu_a, d_m_aa, d_m_ab)


def dssim_loss(render: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Structural dissimilarity (1 - SSIM) / 2 with gradient w.r.t. render."""
    if render.ndim == 2:
        s, g = _ssim_channel(render, target)
        return (1.0 - s) / 2.0, -0.5 * g
    vals, grads = zip(*(_ssim_channel(render[..., c], target[..., c]) for c in range(render.shape[2])))
    value = (1.0 - float(np.mean(vals))) / 2.0
    grad = np.stack(grads, axis=-1) * (-0.5 / render.shape[2])
    return value, grad


def pearson_depth_loss(
    rendered_depth: np.ndarray, prior_depth: np.ndarray, valid_mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """1 - Pearson correlation over valid pixels, gradient w.r.t. rendered.

    Invariant to positive affine transforms of the prior, so un-scaled
    monocular depth estimates work as supervision. Constant inputs (zero
    variance) return 0 with a zero gradient.
    """
    m = np.asarray(valid_mask, dtype=bool)
    grad = np.zeros_like(rendered_depth)
    if m.sum() < 2:
        return 0.0, grad
    x = rendered_depth[m]
    y = prior_depth[m]
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.dot(xc, xc))
    sy = float(np.dot(yc, yc))
    if sx <= 1e-18 or sy <= 1e-18:
        return 0.0, grad
    p = float(np.dot(xc, yc))
    denom = np.sqrt(sx * sy)
    r = p / denom
    d_x = yc / denom - (p / (sx * np.sqrt(sx * sy))) * xc
    grad[m] = -d_x
    return 1.0 - r, grad


class PerceptualMetric(ABC):
    """Nonnegative image distance, differentiable in its first argument."""

    @abstractmethod
    def distance(self, img_a: np.ndarray, img_b: np.ndarray) -> float:
        pass

    @abstractmethod
    def distance_with_grad(self, img_a: np.ndarray, img_b: np.ndarray) -> tuple[float, np.ndarray]:
        pass


class MultiScaleStructureMetric(PerceptualMetric):
    """Non-learned stand-in for a perceptual network.

    Per dyadic scale: a contrast-structure term (1 - mean cs) from the SSIM
    decomposition plus an L1 penalty on image-gradient differences. Both
    terms compare local statistics rather than raw pixels, which keeps the
    distance tolerant to small misalignments, the property the pseudo-view
    loss needs.
    """

    def __init__(self, n_scales: int = 3, structure_weight: float = 0.5, grad_weight: float = 0.25):
        self.n_scales = n_scales
        self.structure_weight = structure_weight
        self.grad_weight = grad_weight

    def distance(self, img_a, img_b) -> float:
        return self.distance_with_grad(img_a, img_b)[0]

    def distance_with_grad(self, img_a, img_b):
        a = np.asarray(img_a, dtype=np.float64)
        b = np.asarray(img_b, dtype=np.float64)
        total = 0.0
        levels = []  # (value, grad-at-level, shape-before-pooling)
        for scale in range(self.n_scales):
            val, grad = self._single_scale(a, b)
            total += val / self.n_scales
            levels.append((grad / self.n_scales, a.shape))
            if scale + 1 == self.n_scales:
                break
            if min(a.shape[0], a.shape[1]) < 2 * (2 * _RADIUS + 2):
                break
            a, b = _pool2(a), _pool2(b)
        # Un-pool each level's gradient back to the input resolution.
        acc = None
        for grad, shape in reversed(levels):
            acc = grad if acc is None else grad + _pool_adjoint(acc, shape)
        return float(total), acc

    def _single_scale(self, a, b):
        nch = a.shape[2] if a.ndim == 3 else 1
        val = 0.0
        grad = np.zeros_like(a)
        for c in (range(nch) if a.ndim == 3 else [None]):
            ac = a if c is None else a[..., c]
            bc = b if c is None else b[..., c]
            cs_val, cs_grad = _cs_term(ac, bc)
            gd_val, gd_grad = _grad_l1(ac, bc)
            val += (self.structure_weight * (1.0 - cs_val) + self.grad_weight * gd_val) / nch
            g = (-self.structure_weight * cs_grad + self.grad_weight * gd_grad) / nch
            if c is None:
                grad += g
            else:
                grad[..., c] += g
        return val, grad


def _cs_term(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean contrast-structure map cs = (2 cov + C2)/(var_a + var_b + C2)."""
    mom = _StructuralMoments(a, b)
    b2 = mom.var_a + mom.var_b + SSIM_C2
    cs = (2 * mom.cov + SSIM_C2) / b2
    n = cs.size
    w = 1.0 / n
    d_mu_a = w * (-2 * mom.mu_b / b2 + 2 * mom.mu_a * cs / b2)
    d_m_aa = w * (-cs / b2)
    d_m_ab = w * (2 / b2)
    return float(cs.mean()), mom.grad_to_image(d_mu_a, d_m_aa, d_m_ab)


def _grad_l1(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean L1 difference of forward-difference image gradients."""
    dax = np.diff(a, axis=1)
    day = np.diff(a, axis=0)
    dbx = np.diff(b, axis=1)
    dby = np.diff(b, axis=0)
    n = dax.size + day.size
    val = (np.abs(dax - dbx).sum() + np.abs(day - dby).sum()) / n
    sx = np.sign(dax - dbx) / n
    sy = np.sign(day - dby) / n
    grad = np.zeros_like(a)
    grad[:, 1:] += sx
    grad[:, :-1] -= sx
    grad[1:, :] += sy
    grad[:-1, :] -= sy
    return float(val), grad


def _pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    h2, w2 = h // 2, w // 2
    img = img[: 2 * h2, : 2 * w2]
    if img.ndim == 3:
        return img.reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))
    return img.reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _pool_adjoint(grad_small: np.ndarray, target_shape) -> np.ndarray:
    """Adjoint of 2x2 mean pooling: spread each cell over its source block / 4."""
    up = np.repeat(np.repeat(grad_small, 2, axis=0), 2, axis=1) / 4.0
    out = np.zeros(target_shape)
    out[: up.shape[0], : up.shape[1]] = up
    return out


def loss_input(
    render: FrameSet,
    target: np.ndarray,
    depth_prior: np.ndarray | None,
    weights: LossWeights,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Input-view supervision: w1 L1 + w2 D-SSIM + w3 Pearson depth.

    Returns (value, d/d(color), d/d(depth)); the depth gradient is None when
    no prior is supplied. The depth term masks to pixels where the render is
    surface-dominated and the prior is positive.
    """
    v1, g1 = l1_loss(render.color, np.asarray(target, dtype=np.float64))
    v2, g2 = dssim_loss(render.color, np.asarray(target, dtype=np.float64))
    value = weights.w1 * v1 + weights.w2 * v2
    grad_color = weights.w1 * g1 + weights.w2 * g2
    grad_depth = None
    if depth_prior is not None and weights.w3 > 0:
        mask = render.valid & (np.asarray(depth_prior) > 0)
        v3, g3 = pearson_depth_loss(render.depth, np.asarray(depth_prior, dtype=np.float64), mask)
        value += weights.w3 * v3
        grad_depth = weights.w3 * g3
    return value, grad_color, grad_depth


def loss_pseudo(
    render: FrameSet,
    pseudo: np.ndarray,
    depth_prior: np.ndarray | None,
    weights: LossWeights,
    metric: PerceptualMetric,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Pseudo-view supervision: w4 perceptual + w5 D-SSIM + w6 Pearson depth."""
    target = np.asarray(pseudo, dtype=np.float64)
    v4, g4 = metric.distance_with_grad(render.color, target)
    v5, g5 = dssim_loss(render.color, target)
    value = weights.w4 * v4 + weights.w5 * v5
    grad_color = weights.w4 * g4 + weights.w5 * g5
    grad_depth = None
    if depth_prior is not None and weights.w6 > 0:
        mask = render.valid & (np.asarray(depth_prior) > 0)
        v6, g6 = pearson_depth_loss(render.depth, np.asarray(depth_prior, dtype=np.float64), mask)
        value += weights.w6 * v6
        grad_depth = weights.w6 * g6
    return value, grad_color, grad_depth
