"""
Multi-level feature maps and synthetic scenes with a planted salient patch
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from apps.numeric.exceptions import NonFiniteError, ShapeError
from apps.numeric.rng import Rng
from apps.numeric.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class FeaturePyramid:
    """
    L feature maps of identical H×W×C shape

    ``anchor_index`` picks the high-level map F* that gets enhanced; the default
    -1 is the last (deepest) level.
    """

    levels: list
    anchor_index: int = -1

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("A feature pyramid needs at least one level")
        self.levels = [level if isinstance(level, Tensor) else Tensor(level) for level in self.levels]
        shape = self.levels[0].shape
        if len(shape) != 3:
            raise ShapeError(f"Feature maps must be H×W×C, got shape {shape}")
        for index, level in enumerate(self.levels):
            if level.shape != shape:
                raise ShapeError(f"Level {index} has shape {level.shape}, expected {shape}")
            if not level.is_finite():
                raise NonFiniteError(f"Level {index} holds non-finite values")
        if not -len(self.levels) <= self.anchor_index < len(self.levels):
            raise ShapeError(f"anchor_index {self.anchor_index} out of range for {len(self.levels)} levels")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def height(self) -> int:
        return self.levels[0].shape[0]

    @property
    def width(self) -> int:
        return self.levels[0].shape[1]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[2]

    @property
    def anchor(self) -> Tensor:
        return self.levels[self.anchor_index]

    def grid_positions(self) -> np.ndarray:
        """(H·W, 2) integer (row, col) anchor positions in row-major order"""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing='ij')
        return np.stack([rows.ravel(), cols.ravel()], axis=-1)


def patch_mask(height: int, width: int, origin: Sequence[int], size: int) -> np.ndarray:
    """Boolean H×W mask of the size×size patch whose top-left cell is ``origin``"""
    row, col = (int(v) for v in origin)
    if not (0 <= row <= height - size and 0 <= col <= width - size):
        raise ShapeError(f"Patch at {origin} of size {size} does not fit a {height}×{width} grid")
    mask = np.zeros((height, width), dtype=bool)
    mask[row:row + size, col:col + size] = True
    return mask


@dataclass
class SalientScene:
    pyramid: FeaturePyramid
    mask: np.ndarray
    cue_direction: np.ndarray


def synthetic_pyramid(height: int = 8, width: int = 8, channels: int = 32, levels: int = 4,
                      patch: Sequence[int] = (2, 3), patch_size: int = 2, seed: int = 0,
                      intensity: float = 3.0, noise: float = 0.1) -> SalientScene:
    """
    Noise maps with one bright patch planted at the same cells on every level

    Each level adds ``intensity`` times its own random unit direction inside the
    patch. The scene also carries a unit ``cue_direction`` that cue targets use.
    """
    rng = Rng(seed).child('pyramid')
    mask = patch_mask(height, width, patch, patch_size)
    maps = []
    for level in range(levels):
        stream = rng.child('level', level)
        values = stream.normal((height, width, channels), scale=noise)
        direction = stream.normal(channels)
        direction /= np.linalg.norm(direction)
        values[mask] += intensity * direction
        maps.append(Tensor(values, name=f'F{level}'))
    cue = rng.child('cue').normal(channels)
    cue /= np.linalg.norm(cue)
    logger.debug(f"Synthetic pyramid {levels}×{height}×{width}×{channels}, patch at {tuple(patch)}")
    return SalientScene(pyramid=FeaturePyramid(maps), mask=mask, cue_direction=cue)
