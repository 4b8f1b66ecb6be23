"""
Reference keyframe selection, the keyframe decision and keyframe
insertion with temporal connections.
"""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from models.errors import ConfigurationError, DomainError
from models.graph import ConnectionKind, KeyframeGraph
from models.keyframe import Frame
from models.pose import Pose, pose_distance
from services.factors import CodeFactor, Factor, FeatureMetricFactor, GeometricConsistencyFactor
from services.losses import descriptor_signature, signature_similarity
from services.matching import MatchingConfig, PairMatches, match_pair
from services.optimizers import FactorWeights, anchor_factors

logger = logging.getLogger(__name__)

REASON_AREA = "area_overlap"
REASON_POINT = "point_overlap"
REASON_MATCHES = "match_inlier_ratio"


@dataclass
class KeyframePolicy:
    max_overlap_area: float = 0.8
    max_overlap_inlier: float = 0.9
    max_match_inlier_ratio: float = 0.4
    min_mean_flow_frac: float = 0.08
    max_temporal_connections: int = 3
    min_connect_inlier_ratio: float = 0.7

    def validate(self):
        ratios = {
            "max_overlap_area": self.max_overlap_area,
            "max_overlap_inlier": self.max_overlap_inlier,
            "max_match_inlier_ratio": self.max_match_inlier_ratio,
            "min_mean_flow_frac": self.min_mean_flow_frac,
            "min_connect_inlier_ratio": self.min_connect_inlier_ratio,
        }
        for name, value in ratios.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
        if self.max_temporal_connections < 1:
            raise ConfigurationError("A keyframe needs at least one temporal connection")


class TrackingDiagnostics(NamedTuple):
    area_overlap: float
    point_overlap: float
    inlier_ratio: float
    mean_flow: float  # pixels


class KeyframeDecision(NamedTuple):
    create: bool
    reasons: Tuple[str, ...]


def should_create_keyframe(
    frame: Frame,
    diagnostics: TrackingDiagnostics,
    policy: Optional[KeyframePolicy] = None,
) -> KeyframeDecision:
    """
    A new keyframe needs enough motion (mean flow of at least a fraction of
    the image width) and at least one sign of novelty: low area overlap,
    low point overlap or a low match inlier ratio.

    Returns:
        KeyframeDecision listing every novelty trigger that fired, even when
        the flow requirement blocks creation
    """
    policy = policy or KeyframePolicy()
    reasons = []
    if diagnostics.area_overlap < policy.max_overlap_area:
        reasons.append(REASON_AREA)
    if diagnostics.point_overlap < policy.max_overlap_inlier:
        reasons.append(REASON_POINT)
    if diagnostics.inlier_ratio < policy.max_match_inlier_ratio:
        reasons.append(REASON_MATCHES)
    moved = diagnostics.mean_flow >= policy.min_mean_flow_frac * frame.camera.width
    return KeyframeDecision(moved and bool(reasons), tuple(reasons))


def select_reference(
    graph: KeyframeGraph,
    last_pose: Pose,
    signature: Optional[np.ndarray] = None,
    similarity_mult: float = 0.6,
) -> int:
    """
    Spatially closest keyframe to ``last_pose`` among those whose appearance
    similarity to ``signature`` is at least ``similarity_mult`` times the best.

    Raises:
        DomainError: on an empty graph
    """
    if not len(graph):
        raise DomainError("Cannot select a reference keyframe from an empty graph")
    ids = graph.ids
    if signature is not None:
        similarity = {i: signature_similarity(signature, graph[i].signature) for i in ids}
        best = max(similarity.values())
        ids = [i for i in ids if similarity[i] >= similarity_mult * best]
    # Ties resolve to the newest keyframe.
    return min(reversed(ids), key=lambda i: pose_distance(graph.poses[i], last_pose))


def pair_rng(seed: int, *ids: int) -> np.random.Generator:
    return np.random.default_rng([seed, *ids])


def match_keyframes(
    graph: KeyframeGraph,
    src: int,
    tgt: int,
    cfg: Optional[MatchingConfig] = None,
    seed: int = 0,
) -> PairMatches:
    """Filtered descriptor matches between two keyframes at their current depths."""
    return match_pair(
        graph[src].frame.descriptors,
        graph[tgt].frame.descriptors,
        graph.depth(src),
        graph.depth(tgt),
        graph[src].camera,
        cfg,
        pair_rng(seed, src, tgt),
    )


def connection_factors(
    graph: KeyframeGraph,
    src: int,
    tgt: int,
    weights: Optional[FactorWeights] = None,
    use_fm: bool = True,
) -> List[Factor]:
    """FM and dense GC from ``src`` into ``tgt``."""
    weights = weights or FactorWeights()
    factors: List[Factor] = []
    if use_fm:
        factors.append(FeatureMetricFactor(graph[src].frame, graph[tgt].frame, src, tgt, weights.fm, weights.fm_levels))
    factors.append(
        GeometricConsistencyFactor(graph[src].frame, graph[tgt].frame, src, tgt, None, weights.gc, weights.sigma_gc)
    )
    return factors


def create_keyframe(
    graph: KeyframeGraph,
    frame: Frame,
    pose: Pose,
    scale: float,
    weights: Optional[FactorWeights] = None,
    policy: Optional[KeyframePolicy] = None,
    matching: Optional[MatchingConfig] = None,
    seed: int = 0,
    use_fm: bool = True,
) -> int:
    """
    Insert ``frame`` as a keyframe at ``pose`` and ``scale`` with a zero code.

    The first keyframe is anchored with PS and SC priors. Every other one is
    connected to the previous keyframe, and to up to
    ``max_temporal_connections - 1`` earlier ones whose match inlier ratio
    reaches ``min_connect_inlier_ratio``.

    Returns:
        The new keyframe id
    """
    weights = weights or FactorWeights()
    policy = policy or KeyframePolicy()
    code = np.zeros(frame.prior.basis_count)
    previous = graph.ids
    kf_id = graph.add_keyframe(frame, pose, scale, code, descriptor_signature(frame.descriptors))
    graph.priors[kf_id] = [CodeFactor(kf_id, code, weights.cd)]
    if not previous:
        graph.priors[kf_id].extend(anchor_factors(kf_id, pose, scale, weights))
        logger.info(f"Keyframe {kf_id} (frame {frame.index}) anchors the map")
        return kf_id

    last = previous[-1]
    graph.connect(kf_id, last, ConnectionKind.TEMPORAL, connection_factors(graph, kf_id, last, weights, use_fm))
    for other in reversed(previous[-policy.max_temporal_connections:-1]):
        ratio = match_keyframes(graph, kf_id, other, matching, seed).inlier_ratio
        if ratio >= policy.min_connect_inlier_ratio:
            graph.connect(kf_id, other, ConnectionKind.TEMPORAL, connection_factors(graph, kf_id, other, weights, use_fm))
        else:
            logger.debug(f"Keyframe {kf_id} not connected to {other}: inlier ratio {ratio:.3f}")
    neighbors = graph.neighbors(kf_id, ConnectionKind.TEMPORAL)
    logger.info(f"Keyframe {kf_id} (frame {frame.index}) connected to {sorted(neighbors)}")
    return kf_id
