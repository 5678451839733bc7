"""Image-quality metrics: PSNR, SSIM, and masked variants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = correlate1d(img, kernel, axis=0, mode="constant")
    return correlate1d(out, kernel, axis=1, mode="constant")


def _valid_crop(img: np.ndarray, radius: int) -> np.ndarray:
    return img[radius:-radius, radius:-radius]


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images.

    Identical inputs (zero MSE) return math.inf, which reports format as
    the distinct "identical" flag rather than a finite value.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shapes must match")
    diff = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != a.shape[: m.ndim]:
            raise ValueError("mask shape must match image")
        diff = diff[m]
    if diff.size == 0:
        raise ValueError("empty mask")
    mse = float(diff.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean local SSIM over windows fully inside the image (and mask).

    11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2 for unit
    dynamic range. Color images average the per-channel result.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shapes must match")
    if a.ndim == 3:
        vals = [ssim(a[..., c], b[..., c], mask) for c in range(a.shape[2])]
        return float(np.mean(vals))

    k = gaussian_kernel()
    r = SSIM_WINDOW // 2
    mu_a = _valid_crop(_filter2d(a, k), r)
    mu_b = _valid_crop(_filter2d(b, k), r)
    m_aa = _valid_crop(_filter2d(a * a, k), r)
    m_bb = _valid_crop(_filter2d(b * b, k), r)
    m_ab = _valid_crop(_filter2d(a * b, k), r)
    var_a = m_aa - mu_a**2
    var_b = m_bb - mu_b**2
    cov = m_ab - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )
    if mask is None:
        return float(smap.mean())
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ValueError("mask shape must match image")
    # Full-window-inside: a window counts only if every pixel is in-mask.
    cover = _valid_crop(_filter2d(m.astype(np.float64), np.ones(SSIM_WINDOW) / SSIM_WINDOW), r)
    full = cover > 1.0 - 1e-12
    if not full.any():
        raise ValueError("mask admits no full windows")
    return float(smap[full].mean())


@dataclass
class MetricReport:
    """Per-view and aggregate quality numbers.

    psnr of math.inf marks identical images; text output renders it as the
    word "identical" so downstream parsing never sees a fake number.
    """

    per_view: list[dict] = field(default_factory=list)

    def add_view(self, view_id, psnr_value: float, ssim_value: float, perceptual: float):
        self.per_view.append(
            {"view": view_id, "psnr": psnr_value, "ssim": ssim_value, "perceptual": perceptual}
        )

    @staticmethod
    def _fmt(x: float) -> str:
        if math.isinf(x):
            return "identical"
        return format(x, ".9g")

    def mean_psnr(self) -> float:
        vals = [v["psnr"] for v in self.per_view]
        return math.inf if all(math.isinf(v) for v in vals) else float(
            np.mean([v for v in vals if not math.isinf(v)])
        )

    def mean_ssim(self) -> float:
        return float(np.mean([v["ssim"] for v in self.per_view]))

    def mean_perceptual(self) -> float:
        return float(np.mean([v["perceptual"] for v in self.per_view]))

    def to_text(self) -> str:
        lines = [
            f"view={v['view']} psnr={self._fmt(v['psnr'])} ssim={self._fmt(v['ssim'])} "
            f"perceptual={self._fmt(v['perceptual'])}"
            for v in self.per_view
        ]
        lines.append(
            f"mean psnr={self._fmt(self.mean_psnr())} ssim={self._fmt(self.mean_ssim())} "
            f"perceptual={self._fmt(self.mean_perceptual())}"
        )
        return "\n".join(lines) + "\n"
