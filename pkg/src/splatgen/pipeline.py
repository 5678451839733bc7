"""End-to-end reconstruction loop: initialize from sparse views, then
alternate pseudo-view generation, densification, and optimization.

Each cycle: 1) freeze the current cloud and, for every adjacent input
pair, interpolate pseudo views through the uncertainty-modulated sampler;
2) densify the cloud from the selected pseudo views; 3) reset the
learning-rate schedule and train on inputs plus pseudo views; 4) evaluate
held-out poses and append a report line. Everything is deterministic
given the config seeds.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera
from .config import PipelineConfig, validate_run_config
from .denoisers import (
    DenoiserInterface,
    IdentityCodec,
    NoisyOracleDenoiser,
    OracleDenoiser,
    PatchCodec,
    ShrinkageDenoiser,
)
from .densify import DepthUnprojectionSource, InsertionRules, ViewSample, densify_from_views
from .gaussians import GaussianCloud, rgb_to_sh0, sh_dim
from .guidance import UncertaintyParams
from .losses import LossWeights, MultiScaleStructureMetric
from .metrics import MetricReport, psnr, ssim
from .render import render
from .sampler import GammaParams, SigmaSchedule, interpolate_views
from .sceneio import SceneData, load_scene, save_gaussians, save_png, save_scene
from .trainer import DensityControlConfig, OptimizerConfig, SupervisionView, TrainState, train_cycle


class StageError(RuntimeError):
    """Pipeline failure tagged with its cycle and stage."""

    def __init__(self, cycle: int, stage: str, cause: Exception):
        super().__init__(f"cycle {cycle}, stage {stage}: {cause}")
        self.cycle = cycle
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    cloud: GaussianCloud
    report_lines: list[str]
    final_report: MetricReport


def _codec_for(cfg: PipelineConfig, image_size: int):
    if cfg.codec == "identity":
        return IdentityCodec()
    codec = PatchCodec(factor=8)
    if image_size % 8:
        raise ValueError(f"patch8 codec needs image sizes divisible by 8, got {image_size}")
    return codec


def _depth_prior_for(cfg: PipelineConfig, scene: SceneData, cam: Camera,
                     view_id: int | None, current: GaussianCloud) -> np.ndarray | None:
    if cfg.depth_prior == "none":
        return None
    if cfg.depth_prior == "gt":
        if view_id is not None and view_id in scene.depths:
            return scene.depths[view_id]
        if scene.cloud is not None:
            f = render(scene.cloud, cam, background=cfg.background)
            return f.depth * f.valid
        return None
    f = render(current, cam, background=cfg.background)
    return f.depth * f.valid


def initialize_cloud(cfg: PipelineConfig, scene: SceneData, rng: np.random.Generator) -> GaussianCloud:
    """Unproject subsampled input depth priors; random-in-frustum fallback."""
    pts, cols = [], []
    for vid in cfg.input_views:
        cam = scene.cameras[vid]
        depth = _depth_prior_for(cfg, scene, cam, vid, None)  # type: ignore[arg-type]
        if depth is None:
            continue
        s = cfg.init_stride
        ys, xs = np.mgrid[0:cam.height:s, 0:cam.width:s]
        d = depth[ys, xs]
        ok = d > 0
        if not ok.any():
            continue
        pix = np.stack([xs[ok], ys[ok]], axis=-1).astype(np.float64)
        pts.append(cam.unproject(pix, d[ok]))
        cols.append(scene.images[vid][ys[ok], xs[ok]])
    if pts:
        points = np.concatenate(pts)
        colors = np.concatenate(cols)
    else:
        cam = scene.cameras[cfg.input_views[0]]
        n = cfg.init_random_count
        pix = np.stack([rng.uniform(0, cam.width - 1, n), rng.uniform(0, cam.height - 1, n)], axis=1)
        depth = rng.uniform(cam.near * 2, cam.far * 0.1, n)
        points = cam.unproject(pix, depth)
        colors = rng.uniform(0.2, 0.8, size=(n, 3))

    tree = cKDTree(points)
    k = min(4, points.shape[0])
    dists, _ = tree.query(points, k=k)
    local = dists[:, 1:].mean(axis=1) if k > 1 else np.full(points.shape[0], 0.02)
    scales = np.clip(local / 2.0, 1e-4, None)
    n = points.shape[0]
    sh = np.zeros((n, sh_dim(1), 3))
    sh[:, 0] = rgb_to_sh0(np.clip(colors, 0.0, 1.0))
    return GaussianCloud(
        means=points,
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        log_scales=np.log(scales)[:, None].repeat(3, axis=1),
        logit_opacities=np.full(n, float(np.log(0.1 / 0.9))),
        sh_coeffs=sh,
    )


def _build_denoiser(cfg: PipelineConfig, scene: SceneData, codec, pair_cams: dict[int, list[Camera]]):
    """In-process denoiser per config; oracle families need the true cloud."""
    if cfg.denoiser == "mock":
        return ShrinkageDenoiser()
    if cfg.denoiser == "bridge":
        from .bridge import BridgeDenoiser, BridgeSession

        session = BridgeSession.connect(cfg.bridge_endpoint)
        return BridgeDenoiser(session)
    if scene.cloud is None:
        raise ValueError(f"denoiser mode {cfg.denoiser!r} needs a ground-truth cloud in the scene dir")
    clips = {}
    for clip_base, cams in pair_cams.items():
        gts = [render(scene.cloud, c, background=cfg.background).color for c in cams]
        clips[clip_base] = codec.encode_batch(gts)
        clips[clip_base + 1] = codec.encode_batch(gts[::-1])
    if cfg.denoiser == "oracle":
        return OracleDenoiser(clips)
    return NoisyOracleDenoiser(clips, cfg.noisy_oracle_sigma, seed=cfg.seed_sampler)


def run_pipeline(cfg: PipelineConfig, write_outputs: bool = True) -> PipelineResult:
    validate_run_config(cfg)
    scene = load_scene(cfg.scene_dir)
    for vid in cfg.input_views:
        if vid not in scene.cameras:
            raise ValueError(f"input view {vid} not in scene")
        if vid not in scene.images:
            raise ValueError(f"input view {vid} has no image")
    out_dir = Path(cfg.output_dir)
    if write_outputs:
        out_dir.mkdir(parents=True, exist_ok=True)

    input_ids = sorted(cfg.input_views)
    eval_ids = cfg.eval_views if cfg.eval_views is not None else [
        i for i in sorted(scene.images) if i not in input_ids
    ]
    image_size = scene.cameras[input_ids[0]].width
    codec = _codec_for(cfg, image_size)
    schedule = SigmaSchedule.geometric(cfg.schedule_steps, cfg.sigma_max, cfg.sigma_min)
    gamma = GammaParams(delta=cfg.gamma_delta, k=cfg.gamma_k_value(), b=cfg.gamma_b_value(),
                        epsilon=cfg.gamma_epsilon)
    if cfg.modulation == "max":
        gamma = GammaParams(delta=1.0, k=0.0, b=0.0, epsilon=cfg.gamma_epsilon)
    uparams = UncertaintyParams(s1=cfg.s1, s2=cfg.s2)
    weights = LossWeights(cfg.w1, cfg.w2, cfg.w3, cfg.w4, cfg.w5, cfg.w6)
    metric = MultiScaleStructureMetric()

    rng_init = np.random.default_rng(cfg.seed_trainer)
    cloud0 = initialize_cloud(cfg, scene, rng_init)
    state = TrainState(
        cloud0,
        opt=OptimizerConfig(schedule_steps=cfg.iters_per_cycle),
        density=DensityControlConfig(
            interval=cfg.densify_interval, start_iteration=cfg.densify_start,
            grad_threshold=cfg.densify_grad_threshold, min_opacity=cfg.prune_opacity,
            max_gaussians=cfg.max_gaussians,
        ),
        seed=cfg.seed_trainer,
    )
    view_rng = np.random.default_rng(cfg.seed_views)

    inputs = [
        SupervisionView(scene.cameras[vid], scene.images[vid],
                        _depth_prior_for(cfg, scene, scene.cameras[vid], vid, state.cloud), vid)
        for vid in input_ids
    ]

    report_lines: list[str] = []
    final_report = MetricReport()
    uncertainty_override = {"full": None, "max": 0.0, "off": 1.0}[cfg.modulation]

    for cycle in range(1, cfg.cycles + 1):
        pseudo_views: list[SupervisionView] = []
        if cfg.use_pseudo_views:
            try:
                from .camera import pose_interpolate

                pairs = list(zip(input_ids[:-1], input_ids[1:]))
                pair_cams = {}
                for p_idx, (a, b) in enumerate(pairs):
                    cams = [pose_interpolate(scene.cameras[a], scene.cameras[b], u)
                            for u in np.linspace(0.0, 1.0, cfg.frames_per_pair)]
                    pair_cams[p_idx * 2] = cams
                denoiser = _build_denoiser(cfg, scene, codec, pair_cams)
                snapshot = state.cloud.copy()
                for p_idx, (a, b) in enumerate(pairs):
                    images, cams, frames = interpolate_views(
                        snapshot, scene.cameras[a], scene.images[a],
                        scene.cameras[b], scene.images[b], cfg.frames_per_pair,
                        denoiser, codec, schedule, seed=cfg.seed_sampler + cycle,
                        gamma_params=gamma, uncertainty_params=uparams,
                        clip_id_base=p_idx * 2, background=cfg.background,
                        uncertainty_override=uncertainty_override,
                    )
                    for k in range(1, cfg.frames_per_pair - 1):
                        img = np.clip(images[k], 0.0, 1.0)
                        prior = _depth_prior_for(cfg, scene, cams[k], None, state.cloud)
                        pseudo_views.append(SupervisionView(cams[k], img, prior,
                                                            f"p{p_idx}f{k}c{cycle}"))
                        if write_outputs:
                            pdir = out_dir / "pseudo" / f"cycle_{cycle}"
                            pdir.mkdir(parents=True, exist_ok=True)
                            save_png(pdir / f"pair{p_idx}_frame{k}.png", img)
                            udir = out_dir / "uncertainty" / f"cycle_{cycle}"
                            udir.mkdir(parents=True, exist_ok=True)
                            u8 = np.round(255.0 * frames[k].uncertainty).astype(np.uint8)
                            from PIL import Image

                            Image.fromarray(u8, mode="L").save(udir / f"pair{p_idx}_frame{k}.png")
            except Exception as e:  # noqa: BLE001
                raise StageError(cycle, "pseudo-view generation", e) from e

            if cfg.point_source == "depth" and pseudo_views:
                try:
                    views = [ViewSample(v.camera, v.image,
                                        v.depth_prior if v.depth_prior is not None
                                        else np.zeros(v.image.shape[:2]))
                             for v in pseudo_views]
                    new_cloud, added = densify_from_views(
                        state.cloud, views, DepthUnprojectionSource(stride=cfg.point_stride),
                        covis_threshold=cfg.covis_threshold, k_neighbors=cfg.outlier_k,
                        m_sigma=cfg.outlier_m, radius_factor=cfg.insert_radius_factor,
                        rules=InsertionRules(max_insert=max(cfg.max_gaussians - state.cloud.count, 0)),
                    )
                    state.notify_insertion(new_cloud)
                except Exception as e:  # noqa: BLE001
                    raise StageError(cycle, "densification", e) from e

        try:
            state.reset_lr_schedule()
            state.rng = view_rng  # view sampling draws from the dedicated seed chain
            train_cycle(state, inputs, pseudo_views, cfg.iters_per_cycle,
                        weights=weights, metric=metric, background=cfg.background)
        except Exception as e:  # noqa: BLE001
            raise StageError(cycle, "optimization", e) from e

        try:
            report = MetricReport()
            for vid in eval_ids:
                frame = render(state.cloud, scene.cameras[vid], background=cfg.background)
                pred = np.clip(frame.color, 0.0, 1.0)
                gt = scene.images[vid]
                report.add_view(vid, psnr(pred, gt), ssim(pred, gt), metric.distance(pred, gt))
            line = (f"cycle={cycle} iters={cfg.iters_per_cycle} "
                    f"psnr={MetricReport._fmt(report.mean_psnr())} "
                    f"ssim={MetricReport._fmt(report.mean_ssim())} "
                    f"perceptual={MetricReport._fmt(report.mean_perceptual())} "
                    f"gaussians={state.cloud.count}")
            report_lines.append(line)
            final_report = report
            if write_outputs:
                ckpt = out_dir / "checkpoints" / f"cycle_{cycle}"
                ckpt.mkdir(parents=True, exist_ok=True)
                save_gaussians(ckpt / "points.bin", state.cloud)
        except Exception as e:  # noqa: BLE001
            raise StageError(cycle, "evaluation", e) from e

    if write_outputs:
        (out_dir / "report.txt").write_text("\n".join(report_lines) + "\n")
        (out_dir / "metrics.txt").write_text(final_report.to_text())
        save_scene(out_dir / "final", scene.cameras, cloud=state.cloud)
    return PipelineResult(cloud=state.cloud, report_lines=report_lines, final_report=final_report)
