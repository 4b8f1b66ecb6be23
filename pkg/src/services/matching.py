"""
Descriptor matching, outlier filtering of 3D correspondences and the
overlap diagnostics used by keyframing and loop verification.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from sklearn.neighbors import NearestNeighbors

from models.camera import Camera
from models.dense_map import DenseMap
from models.depth import DepthPrior
from models.errors import (
    ConfigurationError,
    DimensionMismatchError,
    InsufficientCorrespondencesError,
    NoOverlapError,
)
from models.matches import MatchSet
from models.pose import Pose
from models.similarity import Similarity, umeyama_alignment
from services.warping import clamped_depth, compute_flow

logger = logging.getLogger(__name__)

DEFAULT_MATCH_COUNT = 256
KEYPOINT_STRIDE = 2
NOISE_MULT = 2.0
RANSAC_ITERATIONS = 500
RANSAC_CONSENSUS = 0.8
OVERLAP_SIGMA = 0.03


class FilterResult(NamedTuple):
    matches: MatchSet
    transform: Similarity


def keypoint_grid(mask: np.ndarray, stride: int = KEYPOINT_STRIDE) -> np.ndarray:
    """(N, 2) pixel locations on a regular grid inside ``mask``."""
    grid = np.zeros_like(mask, dtype=bool)
    grid[::stride, ::stride] = True
    rows, cols = np.nonzero(grid & mask)
    return np.stack([cols, rows], axis=1).astype(float)


def match_descriptors(
    src_desc: DenseMap,
    tgt_desc: DenseMap,
    k: int = DEFAULT_MATCH_COUNT,
    stride: int = KEYPOINT_STRIDE,
) -> MatchSet:
    """
    Mutual nearest neighbours in descriptor space over the keypoint grid.

    Args:
        src_desc: source descriptor map
        tgt_desc: target descriptor map with the same channel count
        k: maximum number of returned pairs, closest descriptors first
        stride: keypoint grid spacing in pixels

    Returns:
        MatchSet whose candidate count is the number of returned pairs
    """
    if src_desc.channels != tgt_desc.channels:
        raise DimensionMismatchError(f"Descriptor channels differ: {src_desc.channels} vs {tgt_desc.channels}")
    src_pts = keypoint_grid(src_desc.mask, stride)
    tgt_pts = keypoint_grid(tgt_desc.mask, stride)
    if len(src_pts) == 0 or len(tgt_pts) == 0:
        return MatchSet.empty()

    src_vec = src_desc.values[:, src_pts[:, 1].astype(int), src_pts[:, 0].astype(int)].T
    tgt_vec = tgt_desc.values[:, tgt_pts[:, 1].astype(int), tgt_pts[:, 0].astype(int)].T

    dist_st, idx_st = NearestNeighbors(n_neighbors=1).fit(tgt_vec).kneighbors(src_vec)
    _, idx_ts = NearestNeighbors(n_neighbors=1).fit(src_vec).kneighbors(tgt_vec)
    idx_st = idx_st[:, 0]
    mutual = np.nonzero(idx_ts[idx_st, 0] == np.arange(len(src_vec)))[0]

    # Ties broken by position so swapping sides keeps the same pairs.
    order = np.lexsort((src_pts[mutual, 0], src_pts[mutual, 1], dist_st[mutual, 0]))
    keep = mutual[order[:k]]
    logger.debug(f"{len(mutual)} mutual matches, keeping {len(keep)}")
    return MatchSet(src_pts[keep], tgt_pts[idx_st[keep]], len(keep))


def _lift_matches(pixels: np.ndarray, depth: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    sample = DenseMap(depth, depth > 0).sample(pixels)
    return camera.unproject_points(pixels, sample.values[:, 0]), sample.valid


def _similarity_residuals(transform: Similarity, src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """Distances between mapped source points and their target points, in target units."""
    return np.linalg.norm(transform.apply(src) - tgt, axis=1)


def filter_matches_3d(
    matches: MatchSet,
    src_depth: np.ndarray,
    tgt_depth: np.ndarray,
    camera: Camera,
    noise_mult: float = NOISE_MULT,
    rng: Optional[np.random.Generator] = None,
    max_iterations: int = RANSAC_ITERATIONS,
    consensus: float = RANSAC_CONSENSUS,
) -> FilterResult:
    """
    RANSAC over 3-point similarity hypotheses, then a least-squares refit.

    Matches are lifted with the source and target depth maps. A match is an
    inlier when the hypothesis maps its source point to within
    ``noise_mult * median source depth / fx`` of its target point.

    Returns:
        FilterResult with the inlier subset and the fitted similarity
        taking source points onto target points

    Raises:
        InsufficientCorrespondencesError: if fewer than 3 matches are given
    """
    if len(matches) < 3:
        raise InsufficientCorrespondencesError(f"Need at least 3 matches to filter, got {len(matches)}")
    rng = np.random.default_rng(0) if rng is None else rng

    src_pts, src_ok = _lift_matches(matches.src, src_depth, camera)
    tgt_pts, tgt_ok = _lift_matches(matches.tgt, tgt_depth, camera)
    usable = np.nonzero(src_ok & tgt_ok)[0]
    if len(usable) < 3:
        logger.debug(f"Only {len(usable)} matches have valid depth on both sides")
        return FilterResult(MatchSet.empty(matches.candidate_count), Similarity.identity())
    src_pts, tgt_pts = src_pts[usable], tgt_pts[usable]
    n = len(usable)
    bound = noise_mult * float(np.median(src_pts[:, 2])) / camera.fx

    best_inliers = np.zeros(n, dtype=bool)
    best = Similarity.identity()
    for _ in range(max_iterations):
        pick = rng.choice(n, size=3, replace=False)
        tri = src_pts[pick]
        if np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) < 1e-12:
            continue
        try:
            hypothesis = umeyama_alignment(tri, tgt_pts[pick])
        except InsufficientCorrespondencesError:
            continue
        if not hypothesis.scale > 0:
            continue
        inliers = _similarity_residuals(hypothesis, src_pts, tgt_pts) < bound
        if inliers.sum() > best_inliers.sum():
            best_inliers = inliers
            best = hypothesis
            if inliers.sum() >= consensus * n:
                break

    if best_inliers.sum() < 3:
        return FilterResult(MatchSet.empty(matches.candidate_count), Similarity.identity())

    refit = umeyama_alignment(src_pts[best_inliers], tgt_pts[best_inliers])
    refit_inliers = _similarity_residuals(refit, src_pts, tgt_pts) < bound
    transform = best
    if refit_inliers.sum() >= best_inliers.sum():
        transform, best_inliers = refit, refit_inliers
    selector = usable[best_inliers]
    logger.debug(f"3D filtering kept {len(selector)} of {len(matches)} matches")
    return FilterResult(matches.subset(selector), transform)


def inlier_ratio(filtered: MatchSet, candidates: Optional[MatchSet] = None) -> float:
    """Filtered pairs over the candidate count; 0 when there were no candidates."""
    count = (candidates if candidates is not None else filtered).candidate_count
    if count <= 0:
        return 0.0
    return len(filtered) / count


def overlap_ratios(
    src,
    tgt,
    rel: Pose,
    src_prior: Optional[DepthPrior] = None,
    tgt_prior: Optional[DepthPrior] = None,
    sigma: float = OVERLAP_SIGMA,
) -> tuple[float, float]:
    """
    Area and point-inlier overlap of ``src`` seen from ``tgt``.

    The area ratio is the fraction of the source mask that lands in the
    target mask. The point-inlier ratio is the fraction of the source mask
    whose warped depth agrees with the target depth within ``sigma`` times
    the mean source depth.
    """
    src_prior = src.prior if src_prior is None else src_prior
    tgt_prior = tgt.prior if tgt_prior is None else tgt_prior
    src_count = int(src.mask.sum())
    if src_count == 0:
        return 0.0, 0.0
    try:
        field = compute_flow(src, tgt, rel, src_prior)
    except NoOverlapError:
        return 0.0, 0.0

    src_depth, _ = clamped_depth(src_prior)
    tgt_depth, _ = clamped_depth(tgt_prior)
    rows, cols = np.nonzero(field.valid)
    pixels = np.stack([cols, rows], axis=1).astype(float)
    points = rel.act(src.camera.unproject_points(pixels, src_depth[rows, cols]))
    projected = pixels + field.flow[:, rows, cols].T
    sampled = DenseMap(tgt_depth, tgt.mask).sample(projected)
    tolerance = sigma * float(np.mean(src_depth[src.mask]))
    consistent = sampled.valid & (np.abs(points[:, 2] - sampled.values[:, 0]) < tolerance)
    return len(rows) / src_count, int(consistent.sum()) / src_count


def mean_flow_magnitude(flow: np.ndarray, valid: np.ndarray) -> float:
    """
    Raises:
        NoOverlapError: if ``valid`` is empty
    """
    if not np.any(valid):
        raise NoOverlapError("Mean flow magnitude over an empty overlap set")
    return float(np.mean(np.linalg.norm(flow[:, valid], axis=0)))


@dataclass
class MatchingConfig:
    match_count: int = DEFAULT_MATCH_COUNT
    keypoint_stride: int = KEYPOINT_STRIDE
    noise_mult: float = NOISE_MULT
    ransac_iterations: int = RANSAC_ITERATIONS
    ransac_consensus: float = RANSAC_CONSENSUS

    def validate(self):
        if self.match_count < 3:
            raise ConfigurationError(f"match_count must be at least 3, got {self.match_count}")
        if self.keypoint_stride < 1 or self.ransac_iterations < 1:
            raise ConfigurationError("keypoint_stride and ransac_iterations must be positive")
        if self.noise_mult <= 0 or not 0 < self.ransac_consensus <= 1:
            raise ConfigurationError("noise_mult must be positive and ransac_consensus in (0, 1]")


class PairMatches(NamedTuple):
    candidates: MatchSet
    filtered: MatchSet
    transform: Similarity

    @property
    def inlier_ratio(self) -> float:
        return inlier_ratio(self.filtered, self.candidates)


def match_pair(
    src_desc: DenseMap,
    tgt_desc: DenseMap,
    src_depth: np.ndarray,
    tgt_depth: np.ndarray,
    camera: Camera,
    cfg: Optional[MatchingConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> PairMatches:
    """Descriptor matching followed by 3D filtering; never raises on too few matches."""
    cfg = cfg or MatchingConfig()
    candidates = match_descriptors(src_desc, tgt_desc, cfg.match_count, cfg.keypoint_stride)
    if len(candidates) < 3:
        return PairMatches(candidates, MatchSet.empty(candidates.candidate_count), Similarity.identity())
    result = filter_matches_3d(
        candidates, src_depth, tgt_depth, camera, cfg.noise_mult, rng, cfg.ransac_iterations, cfg.ransac_consensus
    )
    return PairMatches(candidates, result.matches, result.transform)
