"""Typed image planes produced by the renderer and consumed downstream."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FrameSet:
    """Rendered planes for one camera.

    color: (H, W, 3) floats, nominally in [0, 1] for in-gamut scenes.
    depth: (H, W) alpha-normalized expected depth in scene units; 0 where
        nothing was hit.
    alpha: (H, W) accumulated opacity in [0, 1].
    valid: (H, W) bool, True where alpha exceeds the depth-validity
        threshold (0.5) so the depth value is surface-dominated.
    """

    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.color.shape[0]

    @property
    def width(self) -> int:
        return self.color.shape[1]

    def copy(self) -> "FrameSet":
        return FrameSet(self.color.copy(), self.depth.copy(), self.alpha.copy(), self.valid.copy())


DEPTH_VALID_ALPHA = 0.5
