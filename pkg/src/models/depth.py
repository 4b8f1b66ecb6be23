from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from models.errors import DegenerateDepthError, DimensionMismatchError, DomainError

# Composed depth is clamped to this floor inside factor evaluation.
DEPTH_FLOOR = 1e-4


@dataclass(frozen=True, eq=False)
class DepthPrior:
    """
    Compact depth model ``D = s * (average + code . bases)``.

    Attributes:
        average: (H, W) positive average depth
        bases: (B, H, W) depth bases with values in (-1, 1)
        code: (B,) depth code
        scale: positive depth scale
    """
    average: np.ndarray
    bases: np.ndarray
    code: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        average = np.array(self.average, dtype=float)
        bases = np.array(self.bases, dtype=float).reshape(-1, *average.shape)
        code = np.array(self.code, dtype=float).reshape(-1)
        if len(code) != bases.shape[0]:
            raise DimensionMismatchError(f"Code has {len(code)} entries for {bases.shape[0]} bases")
        if not self.scale > 0:
            raise DomainError(f"Depth scale must be positive, got {self.scale}")
        for arr in (average, bases, code):
            arr.setflags(write=False)
        object.__setattr__(self, "average", average)
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "code", code)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def basis_count(self) -> int:
        return self.bases.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.average.shape

    def with_state(self, scale: Optional[float] = None, code: Optional[np.ndarray] = None) -> "DepthPrior":
        return replace(
            self,
            scale=self.scale if scale is None else scale,
            code=self.code if code is None else code,
        )

    def unscaled(self) -> np.ndarray:
        """``average + code . bases`` as an (H, W) map."""
        return self.average + np.tensordot(self.code, self.bases, axes=1)


def compose_depth(
    prior: DepthPrior,
    pixel: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
    strict: bool = False,
) -> np.ndarray | float:
    """
    Evaluate the composed depth.

    Args:
        prior: depth prior carrying the current scale and code
        pixel: integer (x, y) location for the pointwise variant; None for the full map
        mask: optional (H, W) validity mask; the full map is zeroed outside it
        strict: raise if the composed depth is not positive where valid

    Returns:
        A scalar depth, or the (H, W) depth map

    Raises:
        DegenerateDepthError: ``strict`` and a valid depth is <= 0
    """
    if pixel is not None:
        x, y = int(round(pixel[0])), int(round(pixel[1]))
        value = prior.scale * (prior.average[y, x] + prior.code @ prior.bases[:, y, x])
        if strict and value <= 0:
            raise DegenerateDepthError(f"Composed depth {value} at pixel ({x}, {y})")
        return float(value)

    depth = prior.scale * prior.unscaled()
    if mask is not None:
        depth = np.where(mask, depth, 0.0)
        if strict and np.any(depth[mask] <= 0):
            raise DegenerateDepthError(f"{int(np.sum(depth[mask] <= 0))} non-positive depths on the mask")
    elif strict and np.any(depth <= 0):
        raise DegenerateDepthError(f"{int(np.sum(depth <= 0))} non-positive depths")
    return depth
