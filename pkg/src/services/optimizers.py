"""
Optimisation problems built on the LM core: camera tracking, pair-wise
geometric verification, pair-wise alignment, the pose-scale graph used
for global loop closure and the full mapping graph.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from models.depth import DepthPrior
from models.errors import (
    ConfigurationError,
    DisconnectedGraphError,
    InsufficientCorrespondencesError,
    NoOverlapError,
    TrackingLostError,
)
from models.keyframe import Frame
from models.matches import MatchSet
from models.pose import Pose
from models.similarity import Similarity
from models.variables import code_key, pose_key, scale_key
from services.factors import (
    FM_LEVEL_WEIGHTS,
    CodeFactor,
    DepthState,
    Factor,
    FeatureMetricFactor,
    GeometricConsistencyFactor,
    PoseFactor,
    RelativePoseScaleFactor,
    ReprojectionFactor,
    ScaleFactor,
    SparseMatchedGeometryFactor,
)
from services.matching import mean_flow_magnitude, overlap_ratios
from services.solver import STALLED, LMConfig, LMResult, Problem, lm_minimize
from services.warping import compute_flow

logger = logging.getLogger(__name__)

_SRC, _TGT = "src", "tgt"


@dataclass
class FactorWeights:
    fm: float = 1.0
    fm_levels: Tuple[float, ...] = FM_LEVEL_WEIGHTS
    rp: float = 0.1
    sigma_rp: float = 0.03
    smg: float = 0.1
    sigma_smg: float = 0.1
    gc: float = 0.1
    sigma_gc: float = 0.03
    cd: float = 1e-4
    anchor_ps: float = 1e4
    anchor_sc: float = 1e4
    rps_local: float = 1.0
    rps_global: float = 5.0
    loop_sc: float = 10.0
    omega_rot: float = 5.0
    omega_scl: float = 0.5
    omega_r: float = 1.0
    alignment_sc: float = 1.0

    def validate(self):
        for name, value in vars(self).items():
            if name == "fm_levels":
                if any(w < 0 for w in value):
                    raise ConfigurationError("FM level weights must be non-negative")
            elif value < 0:
                raise ConfigurationError(f"Factor weight {name} must be non-negative, got {value}")


@dataclass
class TrackingConfig:
    lm: LMConfig = field(default_factory=LMConfig.tracking)
    use_fm: bool = True
    use_rp: bool = True
    reference_similarity_mult: float = 0.6

    def validate(self):
        self.lm.validate()
        if not (self.use_fm or self.use_rp):
            raise ConfigurationError("Tracking needs at least one of FM and RP")


@dataclass
class MappingConfig:
    """Full-graph and pose-scale graph solver settings."""
    pose_threshold: float = 1e-3
    scale_threshold: float = 1e-3
    code_threshold: float = 1e-2
    max_iters: int = 40
    refine_max_iters: int = 20
    refine_max_no_relinearize: int = 5
    loop_max_iters: int = 200
    loop_max_no_relinearize: int = 5
    loop_pose_threshold: float = 3e-3
    loop_scale_threshold: float = 1e-2
    use_fm: bool = True

    def validate(self):
        if min(self.max_iters, self.refine_max_iters, self.loop_max_iters) < 1:
            raise ConfigurationError("Iteration limits must be positive")

    def full_graph_lm(self, refine: bool = False) -> LMConfig:
        return LMConfig(
            max_iters=self.refine_max_iters if refine else self.max_iters,
            max_no_relinearize=self.refine_max_no_relinearize if refine else None,
            jacobian_recompute_ratio=0.0,
            relinearize_thresholds={"pose": self.pose_threshold, "scale": self.scale_threshold,
                                    "code": self.code_threshold},
        )

    def pose_scale_lm(self) -> LMConfig:
        return LMConfig(
            max_iters=self.loop_max_iters,
            max_no_relinearize=self.loop_max_no_relinearize,
            jacobian_recompute_ratio=0.0,
            relinearize_thresholds={"pose": self.loop_pose_threshold, "scale": self.loop_scale_threshold},
        )


class TrackingResult(NamedTuple):
    pose: Pose  # frame pose in reference keyframe coordinates
    lm: LMResult


class PairGeometry(NamedTuple):
    rel: Pose  # source camera in target coordinates
    src_scale: float
    tgt_scale: float
    area_overlap: float
    point_overlap: float
    mean_flow: float
    lm: LMResult

    @property
    def scale_ratio(self) -> float:
        return self.src_scale / self.tgt_scale


class PairAlignment(NamedTuple):
    rel: Pose
    scale: float
    code: np.ndarray
    lm: LMResult


class GlobalLink(NamedTuple):
    src: Hashable
    tgt: Hashable
    rel: Pose
    src_scale: float
    tgt_scale: float


class PoseScaleResult(NamedTuple):
    poses: Dict[Hashable, Pose]
    scales: Dict[Hashable, float]
    lm: LMResult
    accepted: bool


def _state(prior: DepthPrior, state: Optional[DepthState]) -> DepthState:
    return DepthState(prior.scale, prior.code) if state is None else state


def optimize_tracking(
    ref: Frame,
    frame: Frame,
    init: Pose,
    matches: Optional[MatchSet] = None,
    ref_state: Optional[DepthState] = None,
    weights: Optional[FactorWeights] = None,
    cfg: Optional[TrackingConfig] = None,
) -> TrackingResult:
    """
    Pose of ``frame`` in reference-keyframe coordinates.

    Reference pixels are lifted with the reference depth state and aligned
    into the frame with FM and RP.

    Raises:
        TrackingLostError: if the reference does not overlap the frame at
            ``init`` or no factor has support after optimisation
    """
    weights = weights or FactorWeights()
    cfg = cfg or TrackingConfig()
    cfg.validate()
    state = _state(ref.prior, ref_state)
    prior = ref.prior.with_state(state.scale, state.code)
    try:
        compute_flow(ref, frame, init.inverse(), prior)
    except NoOverlapError as e:
        raise TrackingLostError(f"Frame {frame.index} does not overlap its reference at the initial pose") from e

    factors: List[Factor] = []
    if cfg.use_fm:
        factors.append(FeatureMetricFactor(ref, frame, _SRC, _TGT, weights.fm, weights.fm_levels))
    if cfg.use_rp and matches is not None and len(matches):
        factors.append(ReprojectionFactor(ref, frame, _SRC, _TGT, matches, weights.rp, weights.sigma_rp))
    if not factors:
        raise TrackingLostError(f"No tracking factor available for frame {frame.index}")

    values = {
        pose_key(_SRC): Pose.identity(),
        pose_key(_TGT): init,
        scale_key(_SRC): state.scale,
        code_key(_SRC): np.asarray(state.code, dtype=float),
    }
    problem = Problem(values, factors, fixed={pose_key(_SRC), scale_key(_SRC), code_key(_SRC)})
    result = lm_minimize(problem, cfg.lm)
    if all(f.linearize(result.values).skipped for f in factors):
        raise TrackingLostError(f"Frame {frame.index} lost all overlap during tracking")
    logger.debug(f"Tracked frame {frame.index}: {result.status} after {result.iterations} iterations")
    return TrackingResult(result.values[pose_key(_TGT)], result)


def _pair_diagnostics(src: Frame, tgt: Frame, rel: Pose, src_prior: DepthPrior, tgt_prior: DepthPrior, sigma: float):
    area, point = overlap_ratios(src, tgt, rel, src_prior, tgt_prior, sigma)
    try:
        flow = compute_flow(src, tgt, rel, src_prior)
        mean_flow = mean_flow_magnitude(flow.flow, flow.valid)
    except NoOverlapError:
        mean_flow = np.inf
    return area, point, mean_flow


def optimize_pair_geometric(
    src: Frame,
    tgt: Frame,
    init: Similarity,
    matches: MatchSet,
    src_state: Optional[DepthState] = None,
    tgt_state: Optional[DepthState] = None,
    weights: Optional[FactorWeights] = None,
    lm: Optional[LMConfig] = None,
    use_fm: bool = True,
) -> PairGeometry:
    """
    Relative pose and source scale from FM and SMG, with verification diagnostics.

    ``init`` maps source points, lifted at ``src_state``, onto target points
    lifted at ``tgt_state``, as returned by 3D match filtering.

    Raises:
        InsufficientCorrespondencesError: if fewer than 3 matches are given
    """
    if len(matches) < 3:
        raise InsufficientCorrespondencesError(f"Geometric verification needs 3 matches, got {len(matches)}")
    weights = weights or FactorWeights()
    src_state = _state(src.prior, src_state)
    tgt_state = _state(tgt.prior, tgt_state)

    factors: List[Factor] = [
        SparseMatchedGeometryFactor(src, tgt, _SRC, _TGT, matches, weights.smg, weights.sigma_smg)
    ]
    if use_fm:
        factors.insert(0, FeatureMetricFactor(src, tgt, _SRC, _TGT, weights.fm, weights.fm_levels))
    values = {
        pose_key(_SRC): init.as_pose(),
        pose_key(_TGT): Pose.identity(),
        scale_key(_SRC): init.scale * src_state.scale,
        code_key(_SRC): np.asarray(src_state.code, dtype=float),
        scale_key(_TGT): tgt_state.scale,
        code_key(_TGT): np.asarray(tgt_state.code, dtype=float),
    }
    fixed = {pose_key(_TGT), code_key(_SRC), scale_key(_TGT), code_key(_TGT)}
    result = lm_minimize(Problem(values, factors, fixed), lm or LMConfig.tracking())

    rel = result.values[pose_key(_SRC)]
    src_scale = float(result.values[scale_key(_SRC)])
    src_prior = src.prior.with_state(src_scale, src_state.code)
    tgt_prior = tgt.prior.with_state(tgt_state.scale, tgt_state.code)
    area, point, mean_flow = _pair_diagnostics(src, tgt, rel, src_prior, tgt_prior, weights.sigma_gc)
    return PairGeometry(rel, src_scale, tgt_state.scale, area, point, mean_flow, result)


def optimize_pair_alignment(
    src: Frame,
    tgt: Frame,
    init: Pose,
    matches: Optional[MatchSet] = None,
    tgt_state: Optional[DepthState] = None,
    weights: Optional[FactorWeights] = None,
    lm: Optional[LMConfig] = None,
) -> PairAlignment:
    """
    Relative pose, source scale and source code from FM, SMG, GC, SC and CD.

    The code starts at zero and the source scale starts where the median
    source depth matches the median target depth; SC and CD hold them near
    those starting values.
    """
    weights = weights or FactorWeights()
    tgt_state = _state(tgt.prior, tgt_state)
    bases = src.prior.basis_count
    tgt_depth = tgt.prior.with_state(tgt_state.scale, tgt_state.code)
    tgt_median = float(np.median((tgt_depth.scale * tgt_depth.unscaled())[tgt.mask]))
    src_median = float(np.median(src.prior.average[src.mask]))
    scale = tgt_median / src_median

    factors: List[Factor] = [
        FeatureMetricFactor(src, tgt, _SRC, _TGT, weights.fm, weights.fm_levels),
        GeometricConsistencyFactor(src, tgt, _SRC, _TGT, None, weights.gc, weights.sigma_gc),
        ScaleFactor(_SRC, scale, weights.alignment_sc),
        CodeFactor(_SRC, np.zeros(bases), weights.cd),
    ]
    if matches is not None and len(matches):
        factors.insert(1, SparseMatchedGeometryFactor(src, tgt, _SRC, _TGT, matches, weights.smg, weights.sigma_smg))
    values = {
        pose_key(_SRC): init,
        pose_key(_TGT): Pose.identity(),
        scale_key(_SRC): scale,
        code_key(_SRC): np.zeros(bases),
        scale_key(_TGT): tgt_state.scale,
        code_key(_TGT): np.asarray(tgt_state.code, dtype=float),
    }
    fixed = {pose_key(_TGT), scale_key(_TGT), code_key(_TGT)}
    result = lm_minimize(Problem(values, factors, fixed), lm or LMConfig.differentiable())
    return PairAlignment(
        result.values[pose_key(_SRC)],
        float(result.values[scale_key(_SRC)]),
        np.asarray(result.values[code_key(_SRC)]),
        result,
    )


def check_connected(nodes: Sequence[Hashable], edges: Sequence[Tuple[Hashable, Hashable]]):
    """
    Raises:
        DisconnectedGraphError: if ``edges`` leave more than one component
    """
    index = {n: i for i, n in enumerate(nodes)}
    if not edges:
        if len(nodes) > 1:
            raise DisconnectedGraphError(f"{len(nodes)} nodes and no connections")
        return
    rows = [index[a] for a, _ in edges]
    cols = [index[b] for _, b in edges]
    adjacency = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
    count, _ = connected_components(adjacency, directed=False)
    if count > 1:
        raise DisconnectedGraphError(f"Graph has {count} connected components")


def pose_scale_factors(
    poses: Dict[Hashable, Pose],
    scales: Dict[Hashable, float],
    connections: Sequence[Tuple[Hashable, Hashable]],
    link: GlobalLink,
    weights: Optional[FactorWeights] = None,
) -> List[Factor]:
    """RPS factors on the current connections, the link's RPS and an SC on its source scale."""
    weights = weights or FactorWeights()
    factors: List[Factor] = []
    for a, b in connections:
        rel = poses[b].inverse() @ poses[a]
        factors.append(
            RelativePoseScaleFactor(a, b, rel, scales[a], scales[b], weights.rps_local,
                                    weights.omega_rot, weights.omega_scl)
        )
    factors.append(
        RelativePoseScaleFactor(link.src, link.tgt, link.rel, link.src_scale, link.tgt_scale,
                                weights.rps_global, weights.omega_rot, weights.omega_scl)
    )
    factors.append(ScaleFactor(link.src, link.src_scale, weights.loop_sc))
    return factors


def optimize_pose_scale_graph(
    poses: Dict[Hashable, Pose],
    scales: Dict[Hashable, float],
    connections: Sequence[Tuple[Hashable, Hashable]],
    link: GlobalLink,
    weights: Optional[FactorWeights] = None,
    cfg: Optional[MappingConfig] = None,
) -> PoseScaleResult:
    """
    Absorb a global loop link into all keyframe poses and scales.

    Existing connections get RPS factors targeting the current estimates;
    the new link gets a heavier RPS and an SC on its source scale. The
    first keyframe's pose is held fixed.

    Raises:
        DisconnectedGraphError: if the connections and the link do not span
            every keyframe
    """
    weights = weights or FactorWeights()
    cfg = cfg or MappingConfig()
    nodes = list(poses)
    check_connected(nodes, list(connections) + [(link.src, link.tgt)])
    factors = pose_scale_factors(poses, scales, connections, link, weights)

    values = {}
    for node in nodes:
        values[pose_key(node)] = poses[node]
        values[scale_key(node)] = float(scales[node])
    problem = Problem(values, factors, fixed={pose_key(nodes[0])})
    result = lm_minimize(problem, cfg.pose_scale_lm())
    accepted = not (result.status == STALLED and len(result.error_history) == 1 and result.final_error > 0)
    logger.info(
        f"Pose-scale graph over {len(nodes)} keyframes: error {result.error_history[0]:.4g} -> "
        f"{result.final_error:.4g} ({result.status})"
    )
    return PoseScaleResult(
        {n: result.values[pose_key(n)] for n in nodes},
        {n: float(result.values[scale_key(n)]) for n in nodes},
        result,
        accepted,
    )


def anchor_factors(node: Hashable, pose: Pose, scale: float, weights: Optional[FactorWeights] = None) -> List[Factor]:
    """PS and SC priors holding a keyframe at its current pose and scale."""
    weights = weights or FactorWeights()
    return [
        PoseFactor(node, pose, weights.anchor_ps, weights.omega_r),
        ScaleFactor(node, scale, weights.anchor_sc),
    ]


def optimize_full_graph(problem: Problem, cfg: Optional[MappingConfig] = None, refine: bool = False) -> LMResult:
    """Batch LM over every pose, scale and code with per-variable relinearisation gating."""
    cfg = cfg or MappingConfig()
    return lm_minimize(problem, cfg.full_graph_lm(refine))
