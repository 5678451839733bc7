"""Sparse-view 3D Gaussian splatting with generation-guided pseudo views."""

from .camera import Camera, RigidTransform, pose_compose, pose_interpolate, relative_transform, look_at
from .frames import FrameSet
from .gaussians import Gaussian, GaussianCloud, covariance_of
from .render import (
    CloudGradients,
    ProjectedGaussian,
    oracle_render,
    project_gaussian,
    render,
    render_with_gradients,
)
from .synthetic import SyntheticScene, generate_synthetic_scene

__version__ = "0.1.0"
