"""Gaussian-cloud optimization: per-group Adam, adaptive density control,
and the per-cycle training loop mixing input-view and pseudo-view losses.

Each iteration samples one input view and (when available) one pseudo
view, renders both, forms the combined image-space gradients from the two
supervision losses, and backpropagates through the renderer. Learning
rates follow the common splatting defaults: position with exponential
decay over the cycle (scaled by scene extent), constants for the other
groups. The position learning-rate schedule is reset at every cycle
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Camera
from .frames import FrameSet
from .gaussians import GaussianCloud
from .losses import LossWeights, MultiScaleStructureMetric, PerceptualMetric, loss_input, loss_pseudo
from .render import CloudGradients, render_backward, render_forward


class TrainingError(RuntimeError):
    pass


@dataclass
class SupervisionView:
    """A camera with its target image and optional depth prior."""

    camera: Camera
    image: np.ndarray
    depth_prior: np.ndarray | None = None
    view_id: int | str = ""


@dataclass
class OptimizerConfig:
    lr_means: float = 1.6e-4  # scaled by scene extent, exponentially decayed
    lr_means_final_ratio: float = 0.01
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sh: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_steps: int = 10000  # decay horizon; reset each cycle


@dataclass
class DensityControlConfig:
    interval: int = 100
    start_iteration: int = 500
    grad_threshold: float = 0.01  # on NDC-scale mean positional gradients
    min_opacity: float = 0.005
    percent_dense: float = 0.01  # split/clone size boundary, fraction of extent
    split_scale_shrink: float = 1.6
    max_gaussians: int = 20000


_GROUPS = ("means", "rotations", "log_scales", "logit_opacities", "sh_coeffs")


class TrainState:
    """Mutable optimization state owning the cloud and Adam moments."""

    def __init__(self, cloud: GaussianCloud, opt: OptimizerConfig | None = None,
                 density: DensityControlConfig | None = None, seed: int = 0):
        self.cloud = cloud.copy()
        self.opt = opt or OptimizerConfig()
        self.density = density or DensityControlConfig()
        self.rng = np.random.default_rng(seed)
        self.step = 0
        self.cycle = 0
        self.schedule_step = 0
        self.scene_extent = max(self.cloud.radius(), 1e-6)
        self._m = {g: np.zeros_like(getattr(self.cloud, g)) for g in _GROUPS}
        self._v = {g: np.zeros_like(getattr(self.cloud, g)) for g in _GROUPS}
        self._grad_acc = np.zeros(self.cloud.count)
        self._grad_cnt = np.zeros(self.cloud.count)

    # -- learning rates -------------------------------------------------
    def lr_of(self, group: str) -> float:
        o = self.opt
        if group == "means":
            t = min(self.schedule_step / max(o.schedule_steps, 1), 1.0)
            return o.lr_means * self.scene_extent * (o.lr_means_final_ratio**t)
        return {"rotations": o.lr_rotation, "log_scales": o.lr_scale,
                "logit_opacities": o.lr_opacity, "sh_coeffs": o.lr_sh}[group]

    def reset_lr_schedule(self):
        self.schedule_step = 0

    # -- optimization ---------------------------------------------------
    def apply_gradients(self, grads: CloudGradients):
        self.step += 1
        self.schedule_step += 1
        o = self.opt
        for group in _GROUPS:
            g = getattr(grads, group)
            m, v = self._m[group], self._v[group]
            m *= o.beta1
            m += (1 - o.beta1) * g
            v *= o.beta2
            v += (1 - o.beta2) * g * g
            mhat = m / (1 - o.beta1**self.step)
            vhat = v / (1 - o.beta2**self.step)
            getattr(self.cloud, group)[...] -= self.lr_of(group) * mhat / (np.sqrt(vhat) + o.eps)
        norm = np.linalg.norm(grads.mean2d, axis=1)
        self._grad_acc[grads.visible] += norm[grads.visible]
        self._grad_cnt[grads.visible] += 1

    # -- density control ------------------------------------------------
    def _select_rows(self, keep: np.ndarray):
        self.cloud = self.cloud.subset(keep)
        for d in (self._m, self._v):
            for g in _GROUPS:
                d[g] = d[g][keep]
        self._grad_acc = self._grad_acc[keep]
        self._grad_cnt = self._grad_cnt[keep]

    def _append_rows(self, addition: GaussianCloud):
        self.cloud = GaussianCloud.concatenate(self.cloud, addition)
        for d in (self._m, self._v):
            for g in _GROUPS:
                extra = np.zeros_like(getattr(addition, g))
                d[g] = np.concatenate([d[g], extra])
        self._grad_acc = np.concatenate([self._grad_acc, np.zeros(addition.count)])
        self._grad_cnt = np.concatenate([self._grad_cnt, np.zeros(addition.count)])

    def notify_insertion(self, new_cloud: GaussianCloud):
        """Adopt an externally densified cloud (appended rows only)."""
        added = new_cloud.count - self.cloud.count
        if added < 0:
            raise ValueError("densified cloud has fewer primitives")
        if added:
            self._append_rows(new_cloud.subset(np.arange(self.cloud.count, new_cloud.count)))

    def densify_and_prune(self, image_size: int):
        """Clone small / split large high-gradient Gaussians, prune faint ones."""
        cfg = self.density
        cnt = np.maximum(self._grad_cnt, 1.0)
        # Pixel gradients  ->  NDC-like units so the threshold is resolution-free.
        avg = (self._grad_acc / cnt) * (image_size / 2.0)
        hot = (avg > cfg.grad_threshold) & (self._grad_cnt > 0)
        room = max(cfg.max_gaussians - self.cloud.count, 0)
        if room > 0 and hot.any():
            idx = np.nonzero(hot)[0]
            if idx.size > room:
                idx = idx[np.argsort(-avg[idx])[:room]]
            scales = np.exp(self.cloud.log_scales[idx]).max(axis=1)
            big = scales >= cfg.percent_dense * self.scene_extent
            clone_idx = idx[~big]
            split_idx = idx[big]
            additions = []
            if clone_idx.size:
                c = self.cloud.subset(clone_idx)
                jitter = self.rng.normal(0.0, 0.05, size=c.means.shape) * np.exp(c.log_scales)
                c.means += jitter
                additions.append(c)
            if split_idx.size:
                s = self.cloud.subset(split_idx)
                from . import quaternion as quat

                rot = quat.to_matrix(quat.normalize(s.rotations))
                local = self.rng.normal(size=(s.count, 3)) * np.exp(s.log_scales)
                offset = np.einsum("nij,nj->ni", rot, local)
                shrink = np.log(cfg.split_scale_shrink)
                child_a = s.copy()
                child_a.means += offset
                child_a.log_scales -= shrink
                child_b = s.copy()
                child_b.means -= offset
                child_b.log_scales -= shrink
                additions.append(child_a)
                additions.append(child_b)
            for a in additions:
                self._append_rows(a)
            # Split parents are replaced by their two children.
            keep = np.ones(self.cloud.count, dtype=bool)
            keep[split_idx] = False
            self._select_rows(keep)

        opacity = self.cloud.opacities
        keep = opacity >= cfg.min_opacity
        if self.cloud.count - keep.sum() > 0 and keep.sum() >= 1:
            self._select_rows(keep)
        self._grad_acc[:] = 0.0
        self._grad_cnt[:] = 0.0


def train_cycle(
    state: TrainState,
    inputs: list[SupervisionView],
    pseudo_views: list[SupervisionView],
    iters: int,
    weights: LossWeights | None = None,
    metric: PerceptualMetric | None = None,
    background=(0.0, 0.0, 0.0),
    density_control: bool = True,
) -> TrainState:
    """Run optimization steps alternating input and pseudo supervision.

    Each step samples one input view and one pseudo view (seeded), sums
    their loss gradients, and applies one Adam update. Aborts with
    TrainingError on non-finite losses.
    """
    if not inputs:
        raise ValueError("need at least one input view")
    weights = weights or LossWeights()
    metric = metric or MultiScaleStructureMetric()
    for it in range(iters):
        i_in = int(state.rng.integers(len(inputs)))
        view = inputs[i_in]
        cache = render_forward(state.cloud, view.camera, background, prune_transmittance=1e-4)
        value, g_color, g_depth = loss_input(cache.frame, view.image, view.depth_prior, weights)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite input loss at iteration {it}, view {view.view_id!r}")
        grads = render_backward(cache, g_color, g_depth)

        if pseudo_views:
            i_ps = int(state.rng.integers(len(pseudo_views)))
            pview = pseudo_views[i_ps]
            pcache = render_forward(state.cloud, pview.camera, background, prune_transmittance=1e-4)
            pvalue, pg_color, pg_depth = loss_pseudo(
                pcache.frame, pview.image, pview.depth_prior, weights, metric)
            if not np.isfinite(pvalue):
                raise TrainingError(f"non-finite pseudo loss at iteration {it}, view {pview.view_id!r}")
            grads.add_(render_backward(pcache, pg_color, pg_depth))

        state.apply_gradients(grads)
        cfg = state.density
        if density_control and state.step >= cfg.start_iteration and state.step % cfg.interval == 0:
            state.densify_and_prune(image_size=max(view.camera.width, view.camera.height))
        if not np.all(np.isfinite(state.cloud.means)):
            raise TrainingError(f"non-finite parameters after iteration {it}")
    state.cycle += 1
    return state
