"""Flat pipeline configuration with strict key and range validation.

The config file is a flat YAML mapping. Unknown keys are rejected so a
typo in a hyperparameter name fails loudly instead of silently using a
default. All randomness flows from the named seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # paths and views
    scene_dir: str = ""
    output_dir: str = ""
    input_views: list = field(default_factory=list)
    eval_views: list | None = None  # default: every non-input camera with an image

    # outer loop
    cycles: int = 2
    iters_per_cycle: int = 10000
    frames_per_pair: int = 5
    use_pseudo_views: bool = True

    # sampler schedule
    schedule_steps: int = 25
    sigma_max: float = 80.0
    sigma_min: float = 0.002

    # fusion weights (gamma rule); k/b of None default to 0.5*T and 0.1*T
    gamma_delta: float = 0.5
    gamma_k: float | None = None
    gamma_b: float | None = None
    gamma_epsilon: float = 1e-3
    modulation: str = "full"  # full | max | off

    # uncertainty bandwidths
    s1: float = 100.0
    s2: float = 0.25

    # loss weights
    w1: float = 0.8
    w2: float = 0.2
    w3: float = 1.0
    w4: float = 1.0
    w5: float = 0.2
    w6: float = 1.0

    # component modes
    denoiser: str = "mock"  # mock | oracle | noisy-oracle | bridge
    noisy_oracle_sigma: float = 0.05
    bridge_endpoint: str | None = None
    codec: str = "patch8"  # patch8 | identity
    point_source: str = "depth"  # depth | none
    depth_prior: str = "gt"  # gt | render | none

    # training knobs
    max_gaussians: int = 20000
    densify_interval: int = 100
    densify_start: int = 500
    densify_grad_threshold: float = 0.01
    prune_opacity: float = 0.005
    covis_threshold: float = 0.6
    outlier_k: int = 10
    outlier_m: float = 2.0
    insert_radius_factor: float = 1.5
    point_stride: int = 2
    init_stride: int = 2
    init_random_count: int = 2000

    # rendering
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    # seeds (independently settable randomness roots)
    seed_scene: int = 0
    seed_sampler: int = 1
    seed_trainer: int = 2
    seed_views: int = 3

    # debugging
    dump_latents: bool = False

    def gamma_k_value(self) -> float:
        return 0.5 * self.schedule_steps if self.gamma_k is None else float(self.gamma_k)

    def gamma_b_value(self) -> float:
        return 0.1 * self.schedule_steps if self.gamma_b is None else float(self.gamma_b)


_CHOICES = {
    "denoiser": ("mock", "oracle", "noisy-oracle", "bridge"),
    "codec": ("patch8", "identity"),
    "point_source": ("depth", "none"),
    "depth_prior": ("gt", "render", "none"),
    "modulation": ("full", "max", "off"),
}

_POSITIVE = ("iters_per_cycle", "frames_per_pair", "schedule_steps", "sigma_max", "sigma_min",
             "gamma_epsilon", "s1", "s2", "max_gaussians", "densify_interval",
             "insert_radius_factor", "point_stride", "init_stride", "init_random_count")
_NONNEGATIVE = ("cycles", "w1", "w2", "w3", "w4", "w5", "w6", "noisy_oracle_sigma",
                "densify_start", "densify_grad_threshold", "prune_opacity", "outlier_m")


def config_from_dict(raw: dict) -> PipelineConfig:
    """Build a validated config; unknown keys and bad ranges are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a flat mapping")
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = PipelineConfig(**raw)

    for key, choices in _CHOICES.items():
        if getattr(cfg, key) not in choices:
            raise ConfigError(f"{key} must be one of {choices}")
    for key in _POSITIVE:
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"{key} must be positive")
    for key in _NONNEGATIVE:
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key} must be nonnegative")
    if not 0.0 < cfg.gamma_delta <= 1.0:
        raise ConfigError("gamma_delta must be in (0, 1]")
    if cfg.sigma_min >= cfg.sigma_max:
        raise ConfigError("sigma_min must be below sigma_max")
    if cfg.frames_per_pair < 2:
        raise ConfigError("frames_per_pair must be at least 2")
    if len(cfg.background) != 3:
        raise ConfigError("background must have three components")
    if not all(isinstance(v, (int, float)) for v in cfg.background):
        raise ConfigError("background components must be numbers")
    if cfg.input_views and len(set(cfg.input_views)) != len(cfg.input_views):
        raise ConfigError("input_views contains duplicates")
    if cfg.outlier_k < 1:
        raise ConfigError("outlier_k must be at least 1")
    return cfg


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    raw = yaml.safe_load(p.read_text())
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def validate_run_config(cfg: PipelineConfig):
    """Checks that only apply when executing the pipeline."""
    if not cfg.scene_dir:
        raise ConfigError("scene_dir is required")
    if not Path(cfg.scene_dir).is_dir():
        raise ConfigError(f"scene_dir does not exist: {cfg.scene_dir}")
    if not cfg.output_dir:
        raise ConfigError("output_dir is required")
    if len(cfg.input_views) < 2:
        raise ConfigError("need at least two input_views")
    if cfg.denoiser == "bridge" and not cfg.bridge_endpoint:
        raise ConfigError("bridge denoiser requires bridge_endpoint")
