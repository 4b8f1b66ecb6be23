"""Image-like maps with validity masks, bilinear sampling and Gaussian pyramids."""

from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np
from scipy import ndimage

from models.errors import ConfigurationError, DimensionMismatchError

# Bilinear corners whose weight is below this are not read.
CORNER_EPS = 1e-9

PYRAMID_KERNEL_SIZE = 5
PYRAMID_SIGMA = 1.0


class MapSample(NamedTuple):
    values: np.ndarray  # (N, C)
    valid: np.ndarray  # (N,)
    gradient: Optional[np.ndarray] = None  # (N, C, 2) as d/dx, d/dy


def footprint_valid(mask: np.ndarray, points: np.ndarray) -> np.ndarray:
    """
    Whether bilinear sampling at each (x, y) reads only valid pixels.

    Corners with zero weight are ignored, so integer locations need only
    their own pixel.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    height, width = mask.shape
    x, y = points[:, 0], points[:, 1]
    finite = np.isfinite(x) & np.isfinite(y)
    x = np.where(finite, x, -10.0)
    y = np.where(finite, y, -10.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    ax = x - x0
    ay = y - y0
    xi0 = x0.astype(int)
    yi0 = y0.astype(int)

    need_x0, need_x1 = ax < 1.0 - CORNER_EPS, ax > CORNER_EPS
    need_y0, need_y1 = ay < 1.0 - CORNER_EPS, ay > CORNER_EPS

    def corner_ok(xi, yi):
        inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        ok = np.zeros(len(xi), dtype=bool)
        ok[inside] = mask[yi[inside], xi[inside]]
        return ok

    valid = finite.copy()
    for xi, yi, needed in (
        (xi0, yi0, need_x0 & need_y0),
        (xi0 + 1, yi0, need_x1 & need_y0),
        (xi0, yi0 + 1, need_x0 & need_y1),
        (xi0 + 1, yi0 + 1, need_x1 & need_y1),
    ):
        valid &= ~needed | corner_ok(xi, yi)
    return valid


@dataclass(frozen=True, eq=False)
class DenseMap:
    """C x H x W values with an H x W validity mask."""
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 2:
            values = values[None]
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 3 or mask.shape != values.shape[1:]:
            raise DimensionMismatchError(f"Values {values.shape} and mask {mask.shape} disagree")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def valid_pixels(self) -> np.ndarray:
        """(N, 2) integer-valued (x, y) coordinates of masked-in pixels, row-major."""
        rows, cols = np.nonzero(self.mask)
        return np.stack([cols, rows], axis=1).astype(float)

    def sample(self, points: np.ndarray, with_gradient: bool = False) -> MapSample:
        """
        Bilinear sampling at (N, 2) sub-pixel locations.

        A sample is valid only if every corner with non-zero weight lies
        inside the image and inside the mask. Invalid samples read as 0.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        x, y = points[:, 0], points[:, 1]
        finite = np.isfinite(x) & np.isfinite(y)
        x = np.where(finite, x, -10.0)
        y = np.where(finite, y, -10.0)

        x0 = np.floor(x)
        y0 = np.floor(y)
        ax = x - x0
        ay = y - y0
        xi0 = x0.astype(int)
        yi0 = y0.astype(int)
        xi1 = xi0 + 1
        yi1 = yi0 + 1
        valid = finite & footprint_valid(self.mask, points)

        xc0 = np.clip(xi0, 0, self.width - 1)
        xc1 = np.clip(xi1, 0, self.width - 1)
        yc0 = np.clip(yi0, 0, self.height - 1)
        yc1 = np.clip(yi1, 0, self.height - 1)
        v00 = self.values[:, yc0, xc0].T
        v10 = self.values[:, yc0, xc1].T
        v01 = self.values[:, yc1, xc0].T
        v11 = self.values[:, yc1, xc1].T

        wx = ax[:, None]
        wy = ay[:, None]
        values = (1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v10 + (1 - wx) * wy * v01 + wx * wy * v11
        values[~valid] = 0.0

        gradient = None
        if with_gradient:
            gradient = np.zeros((n, self.channels, 2))
            gradient[:, :, 0] = (1 - wy) * (v10 - v00) + wy * (v11 - v01)
            gradient[:, :, 1] = (1 - wx) * (v01 - v00) + wx * (v11 - v10)
            gradient[~valid] = 0.0
        return MapSample(values, valid, gradient)


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Level 0 is the input map; level i has size H/2^i x W/2^i."""
    levels: List[DenseMap]

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> DenseMap:
        return self.levels[level]


def build_pyramid(
    dense_map: DenseMap,
    level_count: int,
    kernel_size: int = PYRAMID_KERNEL_SIZE,
    sigma: float = PYRAMID_SIGMA,
) -> FeaturePyramid:
    """
    Gaussian pyramid with conservative mask downsampling.

    Each level smooths the previous one with a ``kernel_size`` Gaussian and
    keeps every second pixel. A coarse pixel is valid only when every fine
    pixel under the kernel footprint is valid.

    Raises:
        ConfigurationError: if H or W is not divisible by 2^(L-1)
    """
    if level_count < 1:
        raise ConfigurationError(f"Pyramid needs at least one level, got {level_count}")
    factor = 2 ** (level_count - 1)
    if dense_map.height % factor or dense_map.width % factor:
        raise ConfigurationError(
            f"Map size {dense_map.height}x{dense_map.width} not divisible by {factor} for {level_count} levels"
        )

    radius = kernel_size // 2
    footprint = np.ones((kernel_size, kernel_size), dtype=bool)
    levels = [dense_map]
    for _ in range(1, level_count):
        prev = levels[-1]
        masked = prev.values * prev.mask[None]
        smoothed = ndimage.gaussian_filter(
            masked, sigma=(0.0, sigma, sigma), truncate=radius / sigma, mode="nearest"
        )
        eroded = ndimage.binary_erosion(prev.mask, structure=footprint, border_value=1)
        levels.append(DenseMap(smoothed[:, ::2, ::2], eroded[::2, ::2]))
    return FeaturePyramid(levels)
