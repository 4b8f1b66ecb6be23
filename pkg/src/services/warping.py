"""Warping of source pixels into a target view and the resulting 2D flow."""

import logging
from typing import NamedTuple, Optional

import numpy as np

from models.camera import Camera
from models.dense_map import footprint_valid
from models.depth import DEPTH_FLOOR, DepthPrior
from models.errors import NoOverlapError
from models.pose import Pose

logger = logging.getLogger(__name__)


class Warp(NamedTuple):
    pixels: np.ndarray  # (N, 2) source locations
    points: np.ndarray  # (N, 3) source points in target coordinates
    projected: np.ndarray  # (N, 2) target locations
    valid: np.ndarray  # (N,) in front of the target camera and inside its mask


class FlowField(NamedTuple):
    flow: np.ndarray  # (2, H, W)
    valid: np.ndarray  # (H, W) overlap set
    clamped: int  # masked pixels whose composed depth hit the floor


def clamped_depth(prior: DepthPrior) -> tuple[np.ndarray, np.ndarray]:
    """Composed depth map floored at DEPTH_FLOOR, and where the floor applied."""
    depth = prior.scale * prior.unscaled()
    floored = depth < DEPTH_FLOOR
    return np.where(floored, DEPTH_FLOOR, depth), floored


def warp_pixels(
    camera: Camera,
    pixels: np.ndarray,
    depths: np.ndarray,
    rel: Pose,
    tgt_mask: np.ndarray,
) -> Warp:
    """Lift pixels at the given depths, move them by ``rel`` and project."""
    points = rel.act(camera.unproject_points(pixels, depths))
    projected, in_front = camera.project_points(points)
    valid = in_front & footprint_valid(tgt_mask, projected)
    return Warp(np.asarray(pixels, dtype=float), points, projected, valid)


def compute_flow(src, tgt, rel: Pose, src_prior: Optional[DepthPrior] = None) -> FlowField:
    """
    Dense flow ``pi(T pi^-1(x, D(x))) - x`` over the source mask.

    Args:
        src: frame-like object with ``camera``, ``mask`` and ``prior``
        tgt: frame-like object with ``mask``
        rel: pose of the source camera in target coordinates
        src_prior: depth state to use instead of ``src.prior``

    Returns:
        FlowField with zero flow outside the overlap set

    Raises:
        NoOverlapError: if no source pixel lands inside the target mask
    """
    prior = src.prior if src_prior is None else src_prior
    camera = src.camera
    depth, floored = clamped_depth(prior)
    rows, cols = np.nonzero(src.mask)
    pixels = np.stack([cols, rows], axis=1).astype(float)
    warp = warp_pixels(camera, pixels, depth[rows, cols], rel, tgt.mask)

    flow = np.zeros((2, camera.height, camera.width))
    valid = np.zeros(camera.shape, dtype=bool)
    good = warp.valid
    flow[:, rows[good], cols[good]] = (warp.projected[good] - pixels[good]).T
    valid[rows[good], cols[good]] = True

    clamped = int(np.sum(floored[src.mask]))
    if clamped:
        logger.debug(f"Composed depth clamped at {clamped} pixels")
    if not valid.any():
        raise NoOverlapError("No source pixel projects into the target mask")
    return FlowField(flow, valid, clamped)
