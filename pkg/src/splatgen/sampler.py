"""Uncertainty-modulated variance-exploding sampler and view interpolation.

The reverse update is the discretized VE ODE

    x_{t-1} = x_t + (x_t - x0) / sigma_t * (sigma_{t-1} - sigma_t),

equivalently a contraction of the residual toward the clean prediction by
sigma_{t-1} / sigma_t. Before each step, the denoiser's prediction is fused
per latent cell with the encoded guidance g by the closed-form minimizer of
|x - x0_hat|^2 + gamma |x - g|^2:

    x_fused = (x0_hat + gamma * g) / (1 + gamma).

The fusion weight gamma is 0 where guidance is unreliable (uncertainty
above delta) or when fewer than tau steps remain, and 1/(U + eps)
elsewhere; tau = k * mean(U) + b uses the full-resolution uncertainty mean
of the frame. Here t counts remaining denoising steps (t = T at the first
step, 1 at the last), so positive tau drops guidance for the final steps
and lets the prior refine detail.

Two-view interpolation runs a forward and a backward pass over the frame
axis in lock step, conditioned on the start and end images respectively,
and blends the two updated latents each step with weights beta[i] =
(N - i) / (N - 1) (1-indexed), keeping the endpoints pinned to their own
direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, pose_interpolate
from .denoisers import Conditioning, DenoiserInterface, LatentCodec
from .frames import FrameSet
from .gaussians import GaussianCloud
from .guidance import (
    GuidanceFrame,
    UncertaintyParams,
    build_guidance_image,
    downsample_uncertainty,
    estimate_uncertainty,
    nearest_input_view,
)
from .render import render


@dataclass
class LatentVideo:
    """N x C x H' x W' latent stack traversing the sampler."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ValueError("latent video must be (N, C, H, W)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("latent video must be finite")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


@dataclass
class SigmaSchedule:
    """Strictly decreasing noise levels sigma_T > ... > sigma_0 >= 0."""

    sigmas: np.ndarray

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.sigmas.ndim != 1 or self.sigmas.size < 2:
            raise ValueError("need at least two sigma values")
        if np.any(np.diff(self.sigmas) >= 0):
            raise ValueError("sigmas must be strictly decreasing")
        if self.sigmas[-1] < 0:
            raise ValueError("sigma_0 must be >= 0")
        if self.sigmas[0] <= 0:
            raise ValueError("sigma_T must be > 0")

    @property
    def steps(self) -> int:
        return self.sigmas.size - 1

    @property
    def sigma_max(self) -> float:
        return float(self.sigmas[0])

    @staticmethod
    def geometric(steps: int = 25, sigma_max: float = 80.0, sigma_min: float = 0.002,
                  final_zero: bool = True) -> "SigmaSchedule":
        """Geometric ladder from sigma_max down to sigma_min, then 0."""
        s = np.geomspace(sigma_max, sigma_min, steps)
        if final_zero:
            s = np.append(s, 0.0)
        return SigmaSchedule(s)


@dataclass
class GammaParams:
    """Fusion-weight rule parameters.

    delta: uncertainty cutoff above which guidance is ignored.
    k, b: remaining-step threshold tau = k * mean(U) + b.
    epsilon: division guard, capping gamma at 1/epsilon.
    """

    delta: float = 0.5
    k: float = 12.5
    b: float = 2.5
    epsilon: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must be in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def ve_step(x_t: np.ndarray, x0_fused: np.ndarray, sigma_t: float, sigma_prev: float) -> np.ndarray:
    """One reverse ODE step from noise level sigma_t down to sigma_prev."""
    if not sigma_t > sigma_prev:
        raise ValueError("need sigma_t > sigma_prev")
    if sigma_prev < 0 or sigma_t <= 0:
        raise ValueError("need sigma_t > 0 and sigma_prev >= 0")
    return x_t + (x_t - x0_fused) / sigma_t * (sigma_prev - sigma_t)


def fuse_latents(x0_hat: np.ndarray, g: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Per-cell minimizer of |x - x0_hat|^2 + gamma |x - g|^2."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma < 0):
        raise ValueError("gamma must be nonnegative")
    if gamma.ndim == x0_hat.ndim - 1:
        gamma = gamma[None] if x0_hat.ndim == 3 else gamma[:, None]
    return (x0_hat + gamma * g) / (1.0 + gamma)


def tau_threshold(u_full_mean: float, params: GammaParams) -> float:
    """Remaining-step threshold from the frame's full-resolution mean uncertainty."""
    return params.k * float(u_full_mean) + params.b


def compute_gamma(u_latent: np.ndarray, t: int, params: GammaParams,
                  u_full_mean: float) -> np.ndarray:
    """Fusion weights for one frame at remaining-step count t.

    u_latent is the average-pooled uncertainty at latent resolution;
    u_full_mean is the mean of the full-resolution map (the tau rule is
    evaluated before pooling).
    """
    u_latent = np.asarray(u_latent, dtype=np.float64)
    if np.any((u_latent < 0) | (u_latent > 1)):
        raise ValueError("uncertainty must lie in [0, 1]")
    tau = tau_threshold(u_full_mean, params)
    if t < tau:
        return np.zeros_like(u_latent)
    gamma = 1.0 / (u_latent + params.epsilon)
    gamma[u_latent > params.delta] = 0.0
    return gamma


def blend_bidirectional(x_fwd: np.ndarray, x_bwd: np.ndarray) -> np.ndarray:
    """Frame-weighted merge of forward and (frame-reversed) backward latents.

    With 1-indexed frames, beta[i] = (N - i)/(N - 1): frame 1 is the
    forward latent bit-exactly, frame N the reversed backward latent.
    """
    if x_fwd.shape != x_bwd.shape:
        raise ValueError("latent shapes must match")
    n = x_fwd.shape[0]
    if n < 2:
        raise ValueError("need at least two frames to blend")
    beta = (n - 1.0 - np.arange(n)) / (n - 1.0)
    beta = beta.reshape(n, 1, 1, 1)
    out = beta * x_fwd + (1.0 - beta) * x_bwd[::-1]
    out[0] = x_fwd[0]
    out[-1] = x_bwd[0]
    return out


@dataclass
class _GuidedClip:
    """Encoded guidance for one direction of one trajectory."""

    g: np.ndarray  # (N, C, H', W')
    u_latent: np.ndarray  # (N, H', W')
    u_full_mean: np.ndarray  # (N,)
    conditioning: Conditioning

    def fused_prediction(self, x0_hat: np.ndarray, t: int, params: GammaParams) -> np.ndarray:
        out = np.empty_like(x0_hat)
        for i in range(x0_hat.shape[0]):
            gamma = compute_gamma(self.u_latent[i], t, params, float(self.u_full_mean[i]))
            out[i] = fuse_latents(x0_hat[i], self.g[i], gamma)
        return out


def encode_guidance(codec: LatentCodec, frames: list[GuidanceFrame],
                    conditioning: Conditioning) -> _GuidedClip:
    g = codec.encode_batch([f.image for f in frames])
    lh, lw = g.shape[2], g.shape[3]
    u_lat = np.stack([downsample_uncertainty(f.uncertainty, lh, lw) for f in frames])
    u_mean = np.array([f.uncertainty.mean() for f in frames])
    return _GuidedClip(g=g, u_latent=u_lat, u_full_mean=u_mean, conditioning=conditioning)


def sample_directional(
    denoiser: DenoiserInterface,
    codec: LatentCodec,
    guidance_frames: list[GuidanceFrame],
    conditioning_image: np.ndarray | None,
    schedule: SigmaSchedule,
    seed: int,
    gamma_params: GammaParams | None = None,
    clip_id: int = 0,
) -> LatentVideo:
    """Run the guided reverse process for one direction; returns x_0."""
    if not guidance_frames:
        raise ValueError("need at least one guidance frame")
    gamma_params = gamma_params or GammaParams()
    clip = encode_guidance(codec, guidance_frames, Conditioning(clip_id=clip_id, reference_image=conditioning_image))
    rng = np.random.default_rng(seed)
    x = schedule.sigma_max * rng.standard_normal(clip.g.shape)
    sig = schedule.sigmas
    big_t = schedule.steps
    for i in range(big_t):
        t_remaining = big_t - i
        x0_hat = denoiser.denoise(x, float(sig[i]), clip.conditioning)
        if x0_hat.shape != x.shape:
            raise ValueError("denoiser returned mismatched shape")
        x0_fused = clip.fused_prediction(x0_hat, t_remaining, gamma_params)
        x = ve_step(x, x0_fused, float(sig[i]), float(sig[i + 1]))
    return LatentVideo(x)


def interpolate_views(
    cloud: GaussianCloud,
    cam_a: Camera,
    image_a: np.ndarray,
    cam_b: Camera,
    image_b: np.ndarray,
    n_frames: int,
    denoiser: DenoiserInterface,
    codec: LatentCodec,
    schedule: SigmaSchedule,
    seed: int,
    gamma_params: GammaParams | None = None,
    uncertainty_params: UncertaintyParams | None = None,
    clip_id_base: int = 0,
    background=(0.0, 0.0, 0.0),
    uncertainty_override: float | None = None,
) -> tuple[list[np.ndarray], list[Camera], list[GuidanceFrame]]:
    """Generate n_frames pseudo views along the trajectory from a to b.

    Builds interpolated cameras, warps guidance from the nearer input view
    with cyclic-consistency uncertainty, then runs a lock-stepped
    forward/backward sampler pair blended per step. Frames 1 and N are
    replaced by the true input images. uncertainty_override (for
    ablations) forces every frame's uncertainty map to a constant.
    Returns (images, cameras, guidance frames).
    """
    if n_frames < 2:
        raise ValueError("need at least two frames")
    gamma_params = gamma_params or GammaParams()
    uncertainty_params = uncertainty_params or UncertaintyParams()

    cams = [pose_interpolate(cam_a, cam_b, i / (n_frames - 1)) for i in range(n_frames)]
    inputs = [cam_a, cam_b]
    input_images = [np.asarray(image_a, dtype=np.float64), np.asarray(image_b, dtype=np.float64)]
    input_renders = [render(cloud, c, background=background) for c in inputs]
    lam = max(cloud.radius(), 1e-6) / np.pi

    frames: list[GuidanceFrame] = []
    for i, cam in enumerate(cams):
        if i == 0 or i == n_frames - 1:
            img = input_images[0 if i == 0 else 1]
            frames.append(GuidanceFrame(
                image=img.copy(),
                valid=np.ones(img.shape[:2], dtype=bool),
                uncertainty=np.zeros(img.shape[:2]),
                source_view=0 if i == 0 else 1,
            ))
            continue
        src = nearest_input_view(cam, inputs, lam)
        guid_render = render(cloud, cam, background=background)
        guid = build_guidance_image(cam, cloud, input_images[src], inputs[src],
                                    source_view=src, guid_render=guid_render)
        guid = estimate_uncertainty(
            guid, cam, cloud, input_images[src], inputs[src], uncertainty_params,
            gs_render=guid_render, input_render=input_renders[src],
        )
        frames.append(guid)
    if uncertainty_override is not None:
        for f in frames:
            f.uncertainty = np.full_like(f.uncertainty, float(uncertainty_override))

    fwd = encode_guidance(codec, frames, Conditioning(clip_id=clip_id_base, reference_image=input_images[0], direction="forward"))
    bwd = encode_guidance(codec, frames[::-1], Conditioning(clip_id=clip_id_base + 1, reference_image=input_images[1], direction="backward"))

    rng = np.random.default_rng(seed)
    x = schedule.sigma_max * rng.standard_normal(fwd.g.shape)
    sig = schedule.sigmas
    big_t = schedule.steps
    for i in range(big_t):
        t_remaining = big_t - i
        sigma_t, sigma_prev = float(sig[i]), float(sig[i + 1])
        x0_f = denoiser.denoise(x, sigma_t, fwd.conditioning)
        x0_b = denoiser.denoise(x[::-1].copy(), sigma_t, bwd.conditioning)
        fused_f = fwd.fused_prediction(x0_f, t_remaining, gamma_params)
        fused_b = bwd.fused_prediction(x0_b, t_remaining, gamma_params)
        x_f = ve_step(x, fused_f, sigma_t, sigma_prev)
        x_b = ve_step(x[::-1].copy(), fused_b, sigma_t, sigma_prev)
        x = blend_bidirectional(x_f, x_b)

    images = codec.decode_batch(x)
    images[0] = input_images[0].copy()
    images[-1] = input_images[1].copy()
    return images, cams, frames
