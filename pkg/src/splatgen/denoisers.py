"""Pluggable denoisers and latent codecs for the guided sampler.

The sampler only assumes a clean-latent predictor x0_hat = denoise(x_t,
sigma_t, conditioning) and an image/latent codec. The implementations here
are deterministic test doubles and desk-scale defaults; a real pretrained
model attaches through the wire bridge with the same interface.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Conditioning:
    """Reference-frame handle passed through to the denoiser.

    clip_id identifies the (pair, direction) clip being sampled; oracle
    denoisers use it to look up stored targets and the bridge sends it on
    the wire. reference_image is the conditioning frame for models that
    consume it directly.
    """

    clip_id: int = 0
    reference_image: np.ndarray | None = None
    direction: str = "forward"


class DenoiserInterface(ABC):
    """Predicts the clean latent from a noisy one at a known noise level."""

    @abstractmethod
    def denoise(self, x_t: np.ndarray, sigma_t: float, conditioning: Conditioning) -> np.ndarray:
        """x_t: (N, C, H, W) -> x0_hat of identical shape."""


class EchoDenoiser(DenoiserInterface):
    """Returns x_t unchanged; the reverse step then becomes a fixed point."""

    def denoise(self, x_t, sigma_t, conditioning):
        return x_t.copy()


class ShrinkageDenoiser(DenoiserInterface):
    """Gaussian-prior shrinkage x_t / (1 + sigma^2); cheap smoke-test mock."""

    def denoise(self, x_t, sigma_t, conditioning):
        return x_t / (1.0 + sigma_t * sigma_t)


class OracleDenoiser(DenoiserInterface):
    """Returns pre-supplied target latents for the requested clip."""

    def __init__(self, clips: dict[int, np.ndarray]):
        self.clips = {k: np.asarray(v, dtype=np.float64) for k, v in clips.items()}

    def denoise(self, x_t, sigma_t, conditioning):
        target = self.clips[conditioning.clip_id]
        if target.shape != x_t.shape:
            raise ValueError(f"oracle clip {conditioning.clip_id} has shape {target.shape}, expected {x_t.shape}")
        return target.copy()


class NoisyOracleDenoiser(DenoiserInterface):
    """Oracle targets plus a fixed seeded noise field per clip.

    The noise is drawn once per clip id, so repeated calls with identical
    inputs return identical outputs and whole runs are reproducible.
    """

    def __init__(self, clips: dict[int, np.ndarray], noise_sigma: float, seed: int):
        self.oracle = OracleDenoiser(clips)
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)
        self._noise: dict[int, np.ndarray] = {}

    def denoise(self, x_t, sigma_t, conditioning):
        clean = self.oracle.denoise(x_t, sigma_t, conditioning)
        cid = conditioning.clip_id
        if cid not in self._noise:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, cid]))
            self._noise[cid] = rng.normal(0.0, self.noise_sigma, size=clean.shape)
        return clean + self._noise[cid]


class LatentCodec(ABC):
    """Invertible map between images (H, W, 3) and latents (C, H', W')."""

    @property
    @abstractmethod
    def spatial_factor(self) -> int:
        """Image-to-latent downsampling factor per spatial axis."""

    @property
    @abstractmethod
    def channels(self) -> int:
        pass

    @abstractmethod
    def encode(self, image: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def decode(self, latent: np.ndarray) -> np.ndarray:
        pass

    def encode_batch(self, images) -> np.ndarray:
        return np.stack([self.encode(im) for im in images])

    def decode_batch(self, latents: np.ndarray):
        return [self.decode(lat) for lat in latents]


class IdentityCodec(LatentCodec):
    """Channel transpose only; latents are the image pixels."""

    spatial_factor = 1
    channels = 3

    def encode(self, image):
        return np.transpose(np.asarray(image, dtype=np.float64), (2, 0, 1))

    def decode(self, latent):
        return np.transpose(latent, (1, 2, 0))


class PatchCodec(LatentCodec):
    """Lossless space-to-channel codec: f x f pixel blocks become channels.

    Keeps an exact pixel correspondence between latent cells and image
    patches, so latent-space tests translate directly to image space.
    """

    def __init__(self, factor: int = 8):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self._factor = int(factor)

    @property
    def spatial_factor(self) -> int:
        return self._factor

    @property
    def channels(self) -> int:
        return 3 * self._factor * self._factor

    def encode(self, image):
        img = np.asarray(image, dtype=np.float64)
        h, w, c = img.shape
        f = self._factor
        if h % f or w % f:
            raise ValueError(f"image size {h}x{w} not divisible by factor {f}")
        blocks = img.reshape(h // f, f, w // f, f, c)
        return blocks.transpose(1, 3, 4, 0, 2).reshape(f * f * c, h // f, w // f)

    def decode(self, latent):
        f = self._factor
        c_lat, hh, ww = latent.shape
        c = c_lat // (f * f)
        blocks = latent.reshape(f, f, c, hh, ww).transpose(3, 0, 4, 1, 2)
        return blocks.reshape(hh * f, ww * f, c)
