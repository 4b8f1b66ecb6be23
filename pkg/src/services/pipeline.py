# File: src/services/pipeline.py

"""
SLAM pipeline: camera tracking, keyframe creation, mapping and loop
closure interleaved in a fixed order on a single thread.
"""

import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional

import numpy as np

from models.dense_map import DenseMap
from models.errors import ConfigurationError, NoOverlapError, TrackingLostError
from models.graph import FrameRecord, KeyframeGraph
from models.keyframe import Frame
from models.pose import Pose
from services.evaluation import Trajectory
from services.factors import DepthState
from services.keyframing import (
    KeyframeDecision,
    KeyframePolicy,
    TrackingDiagnostics,
    create_keyframe,
    pair_rng,
    select_reference,
    should_create_keyframe,
)
from services.losses import descriptor_signature
from services.loop_closure import (
    LoopContext,
    LoopPolicy,
    add_local_loop,
    close_global_loop,
    detect_global_loop,
    detect_local_loop,
)
from services.matching import MatchingConfig, match_pair, mean_flow_magnitude, overlap_ratios
from services.optimizers import FactorWeights, MappingConfig, TrackingConfig, optimize_full_graph, optimize_tracking
from services.solver import LMResult, Problem
from services.warping import compute_flow

logger = logging.getLogger(__name__)


@dataclass
class SlamConfig:
    weights: FactorWeights = field(default_factory=FactorWeights)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    keyframe: KeyframePolicy = field(default_factory=KeyframePolicy)
    loop: LoopPolicy = field(default_factory=LoopPolicy)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    seed: int = 0
    enable_loop_closure: bool = True
    enable_local_loop: bool = True
    refine_rounds: int = 1

    def validate(self):
        self.weights.validate()
        self.tracking.validate()
        self.mapping.validate()
        self.keyframe.validate()
        self.loop.validate()
        self.matching.validate()
        if self.refine_rounds < 0:
            raise ConfigurationError(f"refine_rounds must be non-negative, got {self.refine_rounds}")

    def loop_context(self) -> LoopContext:
        return LoopContext(self.loop, self.weights, self.matching, self.seed, self.mapping.use_fm)


class TrackingOutcome(NamedTuple):
    ref: int
    rel: Pose  # frame camera in reference keyframe coordinates
    pose: Pose  # world pose
    frame_scale: float
    diagnostics: TrackingDiagnostics
    lm: LMResult


class SlamResult(NamedTuple):
    trajectory: Trajectory
    keyframe_depths: Dict[int, np.ndarray]  # by frame index
    graph: KeyframeGraph
    records: List[FrameRecord]
    lost_frames: List[int]
    timings: Dict[str, float]


def estimate_frame_scale(ref: Frame, frame: Frame, rel_frame_ref: Pose, ref_state: DepthState) -> float:
    """
    Median ratio between reference points seen in the frame and the frame's
    average depth at the same pixels.

    Raises:
        NoOverlapError: if no reference pixel lands in the frame
    """
    prior = ref.prior.with_state(ref_state.scale, ref_state.code)
    field_ = compute_flow(ref, frame, rel_frame_ref, prior)
    rows, cols = np.nonzero(field_.valid)
    pixels = np.stack([cols, rows], axis=1).astype(float)
    depth = prior.scale * prior.unscaled()
    points = rel_frame_ref.act(ref.camera.unproject_points(pixels, depth[rows, cols]))
    sample = DenseMap(frame.prior.average, frame.mask).sample(pixels + field_.flow[:, rows, cols].T)
    usable = sample.valid & (sample.values[:, 0] > 0) & (points[:, 2] > 0)
    if not usable.any():
        raise NoOverlapError(f"Frame {frame.index} has no depth overlap with its reference")
    return float(np.median(points[usable, 2] / sample.values[usable, 0]))


def track_frame(graph: KeyframeGraph, frame: Frame, last_pose: Pose, cfg: Optional[SlamConfig] = None) -> TrackingOutcome:
    """
    Track ``frame`` against the reference keyframe chosen for ``last_pose``.

    Returns:
        TrackingOutcome with the world pose, the estimated frame depth scale
        and the diagnostics the keyframe decision needs

    Raises:
        TrackingLostError: if the frame cannot be aligned to its reference
    """
    cfg = cfg or SlamConfig()
    ref = select_reference(
        graph, last_pose, descriptor_signature(frame.descriptors), cfg.tracking.reference_similarity_mult
    )
    ref_frame = graph[ref].frame
    ref_state = DepthState(graph.scales[ref], graph.codes[ref])
    init = graph.poses[ref].inverse() @ last_pose

    matches = match_pair(
        ref_frame.descriptors,
        frame.descriptors,
        graph.depth(ref),
        np.where(frame.mask, frame.prior.average, 0.0),
        ref_frame.camera,
        cfg.matching,
        pair_rng(cfg.seed, ref, frame.index),
    )
    result = optimize_tracking(ref_frame, frame, init, matches.filtered, ref_state, cfg.weights, cfg.tracking)
    rel = result.pose
    to_frame = rel.inverse()
    try:
        scale = estimate_frame_scale(ref_frame, frame, to_frame, ref_state)
        ref_prior = graph.prior(ref)
        area, point = overlap_ratios(ref_frame, frame, to_frame, ref_prior, frame.prior.with_state(scale))
        flow = compute_flow(ref_frame, frame, to_frame, ref_prior)
        mean_flow = mean_flow_magnitude(flow.flow, flow.valid)
    except NoOverlapError as e:
        raise TrackingLostError(f"Frame {frame.index} lost its reference {ref} after tracking") from e

    diagnostics = TrackingDiagnostics(area, point, matches.inlier_ratio, mean_flow)
    logger.debug(
        f"Frame {frame.index} on keyframe {ref}: overlap {area:.3f}/{point:.3f}, "
        f"inliers {matches.inlier_ratio:.3f}, flow {mean_flow:.2f}px"
    )
    return TrackingOutcome(ref, rel, graph.poses[ref] @ rel, scale, diagnostics, result.lm)


def run_mapping_round(graph: KeyframeGraph, cfg: Optional[MappingConfig] = None, refine: bool = False) -> LMResult:
    """One batch optimisation over every keyframe pose, scale and code."""
    problem = Problem(graph.values(), graph.all_factors())
    result = optimize_full_graph(problem, cfg, refine)
    graph.update(result.values)
    logger.debug(
        f"Mapping over {len(graph)} keyframes: error {result.error_history[0]:.5g} -> {result.final_error:.5g} "
        f"({result.status}, {result.iterations} iterations)"
    )
    return result


@dataclass
class SlamSystem:
    """
    Frame-by-frame SLAM session.

    Attributes:
        config: every module's settings
        graph: keyframes and their connections
        records: tracked frames in input order
        lost_frames: indices of frames that could not be tracked
        timings: accumulated seconds per stage
    """
    config: SlamConfig = field(default_factory=SlamConfig)
    graph: KeyframeGraph = field(default_factory=KeyframeGraph)
    records: List[FrameRecord] = field(default_factory=list)
    lost_frames: List[int] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=lambda: defaultdict(float))
    last_pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        self.config.validate()

    def _timed(self, stage: str, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.timings[stage] += time.perf_counter() - start

    def _add_keyframe(self, frame: Frame, pose: Pose, scale: float) -> int:
        cfg = self.config
        kf_id = self._timed(
            "keyframing",
            create_keyframe,
            self.graph, frame, pose, scale, cfg.weights, cfg.keyframe, cfg.matching, cfg.seed, cfg.mapping.use_fm,
        )
        self.records.append(FrameRecord(frame.index, kf_id, Pose.identity(), self.graph.scales[kf_id]))
        return kf_id

    def process(self, frame: Frame) -> Optional[FrameRecord]:
        """
        Track one frame and run the keyframing, mapping and loop closure
        steps it triggers.

        Returns:
            The frame's record, or None if tracking was lost
        """
        if not len(self.graph):
            self._add_keyframe(frame, Pose.identity(), 1.0)
            return self.records[-1]

        try:
            outcome = self._timed("tracking", track_frame, self.graph, frame, self.last_pose, self.config)
        except TrackingLostError as e:
            logger.warning(f"Tracking lost: {e}")
            self.lost_frames.append(frame.index)
            return None
        self.last_pose = outcome.pose

        decision: KeyframeDecision = should_create_keyframe(frame, outcome.diagnostics, self.config.keyframe)
        if not decision.create:
            record = FrameRecord(frame.index, outcome.ref, outcome.rel, self.graph.scales[outcome.ref])
            self.records.append(record)
            return record

        logger.info(f"Frame {frame.index} becomes a keyframe ({', '.join(decision.reasons)})")
        self._add_keyframe(frame, outcome.pose, outcome.frame_scale)
        self._timed("mapping", run_mapping_round, self.graph, self.config.mapping)
        self.last_pose = self.graph.poses[self.graph.last_id]
        self._loop_round()
        return self.records[-1]

    def _loop_round(self) -> bool:
        """Query the oldest keyframe not yet queried; False when none is left."""
        pending = [i for i in self.graph.ids if i not in self.graph.queried]
        if not pending:
            return False
        query = pending[0]
        self.graph.queried.add(query)
        if not self.config.enable_loop_closure:
            return True
        ctx = self.config.loop_context()
        if self.config.enable_local_loop:
            candidate = self._timed("local_loop", detect_local_loop, self.graph, query, ctx)
            if candidate is not None:
                add_local_loop(self.graph, candidate, ctx)
        for candidate in self._timed("global_loop", detect_global_loop, self.graph, query, ctx):
            self._timed("global_loop", close_global_loop, self.graph, candidate, ctx, self.config.mapping)
        return True

    def finish(self):
        """Query every remaining keyframe for loops, then refine the map."""
        while self._loop_round():
            pass
        if len(self.graph) > 1:
            for _ in range(self.config.refine_rounds):
                self._timed("mapping", run_mapping_round, self.graph, self.config.mapping, True)
        summary = ", ".join(f"{stage} {seconds:.2f}s" for stage, seconds in self.timings.items())
        logger.info(
            f"Session finished: {len(self.records)} frames tracked, {len(self.lost_frames)} lost, "
            f"{len(self.graph)} keyframes, {len(self.graph.connections)} connections ({summary})"
        )

    def trajectory(self) -> Trajectory:
        return Trajectory([r.index for r in self.records], [self.graph.frame_pose(r) for r in self.records])

    def keyframe_depths(self) -> Dict[int, np.ndarray]:
        return {self.graph[k].frame.index: self.graph.depth(k) for k in self.graph}

    def run(self, frames: Iterable[Frame]) -> SlamResult:
        for frame in frames:
            self.process(frame)
        self.finish()
        return SlamResult(
            self.trajectory(),
            self.keyframe_depths(),
            self.graph,
            list(self.records),
            list(self.lost_frames),
            dict(self.timings),
        )
