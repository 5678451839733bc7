"""Numba-accelerated inner loops of the rasterizer.

Optional: render.py falls back to equivalent vectorized numpy when numba
is unavailable. The kernels are serial and deterministic; a regression
test pins numba/numpy agreement at machine precision.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return deco


FOOTPRINT_MSQ = 9.0
WINDOW_MSQ = 7.0


@njit(cache=True)
def generate_pairs(bbox, mx, my, ia, ib, ic, opacity, rank, width, count):
    """Rasterize footprint bboxes to compact pair arrays.

    Returns (gauss, key, dx, dy, msq, weight, alpha); key orders pairs
    pixel-major with depth rank minor.
    """
    k = bbox.shape[0]
    total = 0
    for i in range(k):
        w = bbox[i, 1] - bbox[i, 0] + 1
        h = bbox[i, 3] - bbox[i, 2] + 1
        if w > 0 and h > 0:
            total += w * h
    gauss = np.empty(total, np.int64)
    key = np.empty(total, np.int64)
    dxs = np.empty(total, np.float64)
    dys = np.empty(total, np.float64)
    msqs = np.empty(total, np.float64)
    ws = np.empty(total, np.float64)
    als = np.empty(total, np.float64)
    m = 0
    for i in range(k):
        x0, x1, y0, y1 = bbox[i, 0], bbox[i, 1], bbox[i, 2], bbox[i, 3]
        a, b, c = ia[i], ib[i], ic[i]
        cx, cy = mx[i], my[i]
        op = opacity[i]
        for py in range(y0, y1 + 1):
            dy = py - cy
            base = py * width
            for px in range(x0, x1 + 1):
                dx = px - cx
                msq = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if msq < FOOTPRINT_MSQ:
                    if msq <= WINDOW_MSQ:
                        s = 1.0
                    else:
                        t = (FOOTPRINT_MSQ - msq) / (FOOTPRINT_MSQ - WINDOW_MSQ)
                        s = t * t * (3.0 - 2.0 * t)
                    w = np.exp(-0.5 * msq) * s
                    gauss[m] = i
                    key[m] = (base + px) * count + rank[i]
                    dxs[m] = dx
                    dys[m] = dy
                    msqs[m] = msq
                    ws[m] = w
                    als[m] = op * w
                    m += 1
    return (gauss[:m].copy(), key[:m].copy(), dxs[:m].copy(), dys[:m].copy(),
            msqs[:m].copy(), ws[:m].copy(), als[:m].copy())


@njit(cache=True)
def scan_transmittance(order, key, alpha, count, hw, prune):
    """Front-to-back product scan over sorted pairs with optional pruning.

    Returns (kept source indices in sorted order, kept pixel ids, kept
    incoming transmittances, kept segment-start flags, per-pixel final
    transmittance). Pruning drops pairs whose incoming transmittance is
    below `prune`; they form a suffix of each pixel run.
    """
    m = order.size
    kept = np.empty(m, np.int64)
    pix_out = np.empty(m, np.int64)
    trans = np.empty(m, np.float64)
    seg_start = np.empty(m, np.bool_)
    t_total = np.ones(hw, np.float64)
    t = 1.0
    prev_pix = -1
    k = 0
    first_of_seg = True
    for j in range(m):
        i = order[j]
        pix = key[i] // count
        if pix != prev_pix:
            if prev_pix >= 0:
                t_total[prev_pix] = t
            t = 1.0
            prev_pix = pix
            first_of_seg = True
        a = alpha[i]
        if t >= prune or prune <= 0.0:
            kept[k] = i
            pix_out[k] = pix
            trans[k] = t
            seg_start[k] = first_of_seg
            first_of_seg = False
            k += 1
        t *= 1.0 - a
    if prev_pix >= 0:
        t_total[prev_pix] = t
    return kept[:k].copy(), pix_out[:k].copy(), trans[:k].copy(), seg_start[:k].copy(), t_total


@njit(cache=True)
def backward_scan(pix, alpha, trans, val, bg_pix):
    """Reverse suffix pass producing d(loss)/d(alpha_hat) per pair.

    val is the per-pair upstream weight (color, depth, alpha terms);
    bg_pix is the per-pixel gradient flowing through the background,
    already scaled by the pixel's final transmittance.
    """
    m = pix.size
    out = np.empty(m, np.float64)
    cur = -1
    b_acc = 0.0
    for j in range(m - 1, -1, -1):
        p = pix[j]
        if p != cur:
            cur = p
            b_acc = bg_pix[p]
        out[j] = val[j] * trans[j] - b_acc / (1.0 - alpha[j])
        b_acc += val[j] * alpha[j] * trans[j]
    return out
