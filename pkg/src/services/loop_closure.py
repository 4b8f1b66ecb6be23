"""
Local and global loop detection with multi-stage verification, and
global loop closure through the pose-scale graph.

Verification compares every candidate pair against a reference pair made
of the query and its closest temporal neighbour: pose distance first
(local loops) or appearance similarity (global loops), then the match
inlier ratio, then overlap and flow after pair-wise geometric refinement.
"""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

from joblib import Parallel, delayed

from models.errors import ConfigurationError, InsufficientCorrespondencesError
from models.graph import ConnectionKind, KeyframeGraph
from models.pose import pose_distance
from services.factors import DepthState
from services.keyframing import connection_factors, match_keyframes
from services.losses import signature_similarity
from services.matching import MatchingConfig, PairMatches
from services.optimizers import (
    FactorWeights,
    GlobalLink,
    MappingConfig,
    PairGeometry,
    optimize_pair_geometric,
    optimize_pose_scale_graph,
)

logger = logging.getLogger(__name__)


@dataclass
class LoopPolicy:
    local_window: int = 9
    distance_mult: float = 5.0
    metric_mult: float = 0.7
    min_inlier_ratio: float = 0.2
    min_overlap: Tuple[float, float] = (0.5, 0.5)
    global_min_gap: int = 10
    global_candidates: int = 5
    similarity_mult: float = 0.7
    rot_weight: float = 1.0
    trans_weight: float = 1.0
    n_jobs: int = 1

    def validate(self):
        for name in ("distance_mult", "metric_mult", "similarity_mult"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.local_window < 1 or self.global_min_gap < 1 or self.global_candidates < 1:
            raise ConfigurationError("Loop windows and candidate counts must be positive")
        if len(self.min_overlap) != 2:
            raise ConfigurationError(f"min_overlap needs (area, point), got {self.min_overlap}")


class PairVerification(NamedTuple):
    src: int
    tgt: int
    matches: PairMatches
    geometry: Optional[PairGeometry]

    @property
    def inlier_ratio(self) -> float:
        return self.matches.inlier_ratio


class LoopCandidate(NamedTuple):
    src: int  # newer keyframe
    tgt: int
    verification: PairVerification


@dataclass
class LoopContext:
    """Everything loop verification reads besides the graph."""
    policy: LoopPolicy
    weights: FactorWeights
    matching: MatchingConfig
    seed: int = 0
    use_fm: bool = True


def _ordered(a: int, b: int) -> Tuple[int, int]:
    return (a, b) if a > b else (b, a)


def verify_pair(graph: KeyframeGraph, a: int, b: int, ctx: LoopContext, geometric: bool = True) -> PairVerification:
    """
    Match the newer keyframe of ``(a, b)`` against the older one and, when
    asked, refine their relative pose and source scale from the filtered
    matches.
    """
    src, tgt = _ordered(a, b)
    matches = match_keyframes(graph, src, tgt, ctx.matching, ctx.seed)
    if not geometric or len(matches.filtered) < 3:
        return PairVerification(src, tgt, matches, None)
    try:
        geometry = optimize_pair_geometric(
            graph[src].frame,
            graph[tgt].frame,
            matches.transform,
            matches.filtered,
            DepthState(graph.scales[src], graph.codes[src]),
            DepthState(graph.scales[tgt], graph.codes[tgt]),
            ctx.weights,
            use_fm=ctx.use_fm,
        )
    except InsufficientCorrespondencesError:
        geometry = None
    return PairVerification(src, tgt, matches, geometry)


def _verify_many(graph: KeyframeGraph, pairs: List[Tuple[int, int]], ctx: LoopContext, geometric: bool):
    if ctx.policy.n_jobs == 1 or len(pairs) < 2:
        return [verify_pair(graph, a, b, ctx, geometric) for a, b in pairs]
    return Parallel(n_jobs=ctx.policy.n_jobs)(delayed(verify_pair)(graph, a, b, ctx, geometric) for a, b in pairs)


def reference_pair(graph: KeyframeGraph, query: int) -> Optional[int]:
    """Temporal neighbour of ``query`` closest in id; older on ties."""
    neighbors = graph.neighbors(query, ConnectionKind.TEMPORAL)
    if not neighbors:
        return None
    return min(sorted(neighbors), key=lambda n: abs(n - query))


def _passes_geometry(candidate: PairGeometry, reference: PairGeometry, policy: LoopPolicy) -> bool:
    min_area, min_point = policy.min_overlap
    return (
        candidate.area_overlap > policy.metric_mult * reference.area_overlap
        and candidate.point_overlap > policy.metric_mult * reference.point_overlap
        and candidate.area_overlap >= min_area
        and candidate.point_overlap >= min_point
        and candidate.mean_flow < reference.mean_flow / policy.metric_mult
    )


def _verify_against(
    graph: KeyframeGraph,
    query: int,
    candidates: List[int],
    reference: PairVerification,
    ctx: LoopContext,
) -> List[PairVerification]:
    """Appearance then geometric verification of candidates against the reference pair."""
    policy = ctx.policy
    min_ratio = max(policy.metric_mult * reference.inlier_ratio, policy.min_inlier_ratio)
    appearance = _verify_many(graph, [(query, c) for c in candidates], ctx, geometric=False)
    passed = [v for v in appearance if v.inlier_ratio > min_ratio]
    logger.debug(f"Query {query}: {len(passed)} of {len(candidates)} candidates pass the inlier ratio {min_ratio:.3f}")
    if not passed:
        return []
    verified = _verify_many(graph, [(v.src, v.tgt) for v in passed], ctx, geometric=True)
    return [v for v in verified if v.geometry is not None and _passes_geometry(v.geometry, reference.geometry, policy)]


def _reference(graph: KeyframeGraph, query: int, ctx: LoopContext) -> Optional[PairVerification]:
    neighbor = reference_pair(graph, query)
    if neighbor is None:
        return None
    reference = verify_pair(graph, query, neighbor, ctx)
    if reference.geometry is None:
        logger.debug(f"Query {query}: reference pair with {neighbor} could not be verified")
        return None
    return reference


def detect_local_loop(graph: KeyframeGraph, query: int, ctx: LoopContext) -> Optional[LoopCandidate]:
    """
    Best unconnected keyframe within the temporal window of ``query`` that
    passes distance, inlier-ratio and geometric verification.

    Returns:
        The loop candidate, or None when nothing survives
    """
    policy = ctx.policy
    window = [
        i for i in graph.ids
        if i != query and abs(i - query) <= policy.local_window and not graph.is_connected(i, query)
    ]
    if not window:
        return None
    neighbor = reference_pair(graph, query)
    if neighbor is None:
        return None

    def distance(other: int) -> float:
        return pose_distance(graph.poses[query], graph.poses[other], policy.rot_weight, policy.trans_weight)

    reference_distance = distance(neighbor)
    nearby = [i for i in window if distance(i) < policy.distance_mult * reference_distance]
    if not nearby:
        return None
    reference = _reference(graph, query, ctx)
    if reference is None:
        return None

    survivors = _verify_against(graph, query, nearby, reference, ctx)
    if not survivors:
        return None
    best = min(survivors, key=lambda v: (-v.geometry.area_overlap, v.geometry.mean_flow, v.tgt))
    logger.info(
        f"Local loop {best.src}-{best.tgt}: overlap {best.geometry.area_overlap:.3f}, "
        f"flow {best.geometry.mean_flow:.2f}px"
    )
    return LoopCandidate(best.src, best.tgt, best)


def add_local_loop(graph: KeyframeGraph, candidate: LoopCandidate, ctx: LoopContext):
    graph.connect(
        candidate.src,
        candidate.tgt,
        ConnectionKind.LOCAL,
        connection_factors(graph, candidate.src, candidate.tgt, ctx.weights, ctx.use_fm),
    )


def detect_global_loop(graph: KeyframeGraph, query: int, ctx: LoopContext) -> List[LoopCandidate]:
    """
    Verified global loops for ``query`` among keyframes at least
    ``global_min_gap`` ids away, retrieved by signature similarity.

    Returns:
        Candidates ranked by inlier ratio, pairwise at least
        ``global_min_gap`` ids apart
    """
    policy = ctx.policy
    pool = [
        i for i in graph.ids
        if abs(i - query) >= policy.global_min_gap and not graph.is_connected(i, query)
    ]
    if not pool:
        return []
    neighbor = reference_pair(graph, query)
    if neighbor is None:
        return []

    signature = graph[query].signature
    similarity = {i: signature_similarity(signature, graph[i].signature) for i in pool}
    reference_similarity = signature_similarity(signature, graph[neighbor].signature)
    top = sorted(pool, key=lambda i: (-similarity[i], i))[:policy.global_candidates]
    retrieved = [i for i in top if similarity[i] > policy.similarity_mult * reference_similarity]
    if not retrieved:
        return []
    reference = _reference(graph, query, ctx)
    if reference is None:
        return []

    survivors = _verify_against(graph, query, retrieved, reference, ctx)
    ranked = sorted(survivors, key=lambda v: (-v.inlier_ratio, v.tgt))
    selected: List[LoopCandidate] = []
    for v in ranked:
        other = v.tgt if v.src == query else v.src
        if all(abs(other - (s.tgt if s.src == query else s.src)) >= policy.global_min_gap for s in selected):
            selected.append(LoopCandidate(v.src, v.tgt, v))
    for c in selected:
        logger.info(f"Global loop candidate {c.src}-{c.tgt}: inlier ratio {c.verification.inlier_ratio:.3f}")
    return selected


def close_global_loop(
    graph: KeyframeGraph,
    candidate: LoopCandidate,
    ctx: LoopContext,
    mapping: Optional[MappingConfig] = None,
) -> bool:
    """
    Absorb a verified global loop into every keyframe pose and scale, then
    connect the pair with FM and GC.

    Returns:
        False when the pose-scale graph rejected the link; the graph is then
        left untouched
    """
    geometry = candidate.verification.geometry
    link = GlobalLink(candidate.src, candidate.tgt, geometry.rel, geometry.src_scale, geometry.tgt_scale)
    result = optimize_pose_scale_graph(
        graph.poses,
        graph.scales,
        [c.pair for c in graph.connections],
        link,
        ctx.weights,
        mapping,
    )
    if not result.accepted:
        logger.warning(f"Global loop {candidate.src}-{candidate.tgt} rejected: {result.lm.status}")
        return False
    graph.poses.update(result.poses)
    graph.scales.update(result.scales)
    graph.connect(
        candidate.src,
        candidate.tgt,
        ConnectionKind.GLOBAL,
        connection_factors(graph, candidate.src, candidate.tgt, ctx.weights, ctx.use_fm),
    )
    logger.info(f"Global loop {candidate.src}-{candidate.tgt} closed")
    return True
