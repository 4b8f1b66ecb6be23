import numpy as np
import pytest

import services.pipeline as pipeline
from models.errors import ConfigurationError, DomainError, TrackingLostError
from models.graph import ConnectionKind, FrameRecord, KeyframeGraph
from models.pose import Pose
from models.variables import scale_key
from services.evaluation import metrics_report
from services.factors import CodeFactor, DepthState, GeometricConsistencyFactor, PoseFactor, ScaleFactor
from services.keyframing import (
    REASON_AREA,
    REASON_MATCHES,
    REASON_POINT,
    KeyframePolicy,
    TrackingDiagnostics,
    create_keyframe,
    select_reference,
    should_create_keyframe,
)
from services.loop_closure import (
    LoopCandidate,
    LoopPolicy,
    PairVerification,
    close_global_loop,
    detect_global_loop,
    detect_local_loop,
    reference_pair,
)
from services.optimizers import PairGeometry
from services.pipeline import SlamConfig, SlamSystem, TrackingOutcome, estimate_frame_scale, run_mapping_round
from services.simulator import SCENE_DIAMETER, SceneConfig, generate_sequence
from tests.conftest import smooth_frame, tiny_camera


def at_x(x: float) -> Pose:
    return Pose(np.eye(3), [x, 0.0, 0.0])


def tiny_graph(xs, connect=True) -> KeyframeGraph:
    """Keyframes on a line, chained by factor-less temporal connections."""
    camera = tiny_camera()
    graph = KeyframeGraph()
    for i, x in enumerate(xs):
        frame = smooth_frame(i, camera, phase=0.1 * i)
        graph.add_keyframe(frame, at_x(x), 1.0, np.zeros(3), np.zeros((2, 10)))
        if connect and i:
            graph.connect(i, i - 1, ConnectionKind.TEMPORAL)
    return graph


def one_hot_signature(bin_index: int, channels: int = 2, bins: int = 100) -> np.ndarray:
    hist = np.zeros(bins)
    hist[bin_index] = 1.0
    return np.tile(np.cumsum(hist), (channels, 1))


class TestGraph:
    def test_rejects_non_positive_scale(self):
        graph = KeyframeGraph()
        with pytest.raises(DomainError):
            graph.add_keyframe(smooth_frame(0, tiny_camera()), Pose.identity(), 0.0, np.zeros(3), np.zeros(1))

    @pytest.mark.parametrize("pair", [(1, 1), (1, 7), (1, 0), (0, 1)])
    def test_invalid_connections(self, pair):
        graph = tiny_graph([0.0, 1.0])
        with pytest.raises(DomainError):
            graph.connect(*pair, ConnectionKind.LOCAL)

    def test_neighbors_by_kind(self):
        graph = tiny_graph([0.0, 1.0, 2.0])
        graph.connect(2, 0, ConnectionKind.GLOBAL)
        assert sorted(graph.neighbors(2)) == [0, 1]
        assert graph.neighbors(2, ConnectionKind.TEMPORAL) == [1]
        assert graph.neighbors(0, ConnectionKind.GLOBAL) == [2]
        assert (graph.anchor_id, graph.last_id) == (0, 2)

    def test_update_and_depth(self):
        graph = tiny_graph([0.0, 1.0])
        graph.update({scale_key(1): 2.0})
        assert graph.scales == {0: 1.0, 1: 2.0}
        np.testing.assert_allclose(graph.depth(1), 2.0 * graph[1].prior.average)

    def test_depth_is_zero_outside_mask(self):
        camera = tiny_camera()
        mask = np.ones(camera.shape, dtype=bool)
        mask[:, :3] = False
        graph = KeyframeGraph()
        graph.add_keyframe(smooth_frame(0, camera, mask=mask), Pose.identity(), 1.0, np.zeros(3), np.zeros(1))
        assert np.all(graph.depth(0)[:, :3] == 0.0)
        assert np.all(graph.depth(0)[:, 3:] > 0.0)

    def test_frame_pose_follows_reference_scale(self):
        graph = tiny_graph([1.0])
        record = FrameRecord(5, 0, Pose(np.eye(3), [0.0, 0.3, 0.0]), 1.0)
        graph.scales[0] = 2.0
        np.testing.assert_allclose(graph.frame_pose(record).translation, [1.0, 0.6, 0.0])


class TestKeyframeDecision:
    @pytest.fixture
    def frame(self):
        # 10 px wide, so the flow gate sits at 0.8 px
        return smooth_frame(0, tiny_camera())

    def test_no_novelty(self, frame):
        decision = should_create_keyframe(frame, TrackingDiagnostics(0.9, 0.95, 0.5, 2.0))
        assert decision == (False, ())

    def test_single_trigger(self, frame):
        decision = should_create_keyframe(frame, TrackingDiagnostics(0.7, 0.95, 0.5, 0.8))
        assert decision.create
        assert decision.reasons == (REASON_AREA,)

    def test_flow_gate(self, frame):
        decision = should_create_keyframe(frame, TrackingDiagnostics(0.7, 0.5, 0.1, 0.79))
        assert not decision.create
        assert decision.reasons == (REASON_AREA, REASON_POINT, REASON_MATCHES)

    def test_policy_validation(self):
        with pytest.raises(ConfigurationError):
            KeyframePolicy(max_overlap_area=1.5).validate()
        with pytest.raises(ConfigurationError):
            KeyframePolicy(max_temporal_connections=0).validate()


class TestReferenceSelection:
    def test_closest(self):
        assert select_reference(tiny_graph([0.0, 1.0, 2.0]), at_x(1.2)) == 1

    def test_tie_goes_to_newest(self):
        assert select_reference(tiny_graph([0.0, 2.0]), at_x(1.0)) == 1

    def test_appearance_filter(self):
        camera = tiny_camera()
        graph = KeyframeGraph()
        graph.add_keyframe(smooth_frame(0, camera), at_x(0.0), 1.0, np.zeros(3), one_hot_signature(10))
        graph.add_keyframe(smooth_frame(1, camera), at_x(1.0), 1.0, np.zeros(3), one_hot_signature(90))
        # keyframe 1 is closer but looks nothing like the query
        assert select_reference(graph, at_x(0.9), one_hot_signature(10)) == 0

    def test_empty_graph(self):
        with pytest.raises(DomainError):
            select_reference(KeyframeGraph(), Pose.identity())


class TestKeyframeCreation:
    def test_first_keyframe_is_anchored(self):
        graph = KeyframeGraph()
        kf_id = create_keyframe(graph, smooth_frame(0, tiny_camera()), at_x(0.5), 1.5)
        assert kf_id == 0
        assert [type(f) for f in graph.priors[0]] == [CodeFactor, PoseFactor, ScaleFactor]
        assert graph.connections == []
        np.testing.assert_array_equal(graph.codes[0], np.zeros(3))

    def test_temporal_connections(self):
        camera = tiny_camera()
        graph = KeyframeGraph()
        lenient = KeyframePolicy(min_connect_inlier_ratio=0.0)
        for i in range(3):
            create_keyframe(graph, smooth_frame(i, camera, phase=0.1 * i), at_x(0.05 * i), 1.0, policy=lenient)
        assert [type(f) for f in graph.priors[1]] == [CodeFactor]
        first = graph.connections[0]
        assert first.pair == (1, 0) and first.kind == ConnectionKind.TEMPORAL
        assert len(graph.factors[first]) == 2
        assert sorted(graph.neighbors(2, ConnectionKind.TEMPORAL)) == [0, 1]

    def test_connection_limit_and_geometry_only(self):
        camera = tiny_camera()
        graph = KeyframeGraph()
        policy = KeyframePolicy(max_temporal_connections=1)
        for i in range(3):
            create_keyframe(graph, smooth_frame(i, camera, phase=0.1 * i), at_x(0.05 * i), 1.0,
                            policy=policy, use_fm=False)
        assert graph.neighbors(2, ConnectionKind.TEMPORAL) == [1]
        factors = graph.factors[graph.connections[-1]]
        assert [type(f) for f in factors] == [GeometricConsistencyFactor]


class TestTracking:
    @pytest.fixture
    def seeded_graph(self, sweep_sequence):
        graph = KeyframeGraph()
        create_keyframe(graph, sweep_sequence[0].frame, sweep_sequence[0].pose, 1.0)
        return graph

    def test_tracks_against_ground_truth_keyframe(self, seeded_graph, sweep_sequence):
        current = sweep_sequence[2]
        outcome = pipeline.track_frame(seeded_graph, current.frame, sweep_sequence[1].pose)
        motion = np.linalg.norm(current.pose.translation - sweep_sequence[0].pose.translation)
        assert outcome.ref == 0
        assert np.linalg.norm(outcome.pose.translation - current.pose.translation) < 0.3 * motion
        assert outcome.frame_scale == pytest.approx(1.0, abs=0.05)
        assert outcome.diagnostics.area_overlap > 0.8
        assert outcome.diagnostics.mean_flow > 0.0

    def test_lost_far_from_the_map(self, seeded_graph, sweep_sequence):
        with pytest.raises(TrackingLostError):
            pipeline.track_frame(seeded_graph, sweep_sequence[1].frame, at_x(5.0))

    def test_frame_scale_from_reference_scale(self, sweep_sequence):
        frame = sweep_sequence[0].frame
        state = DepthState(2.0, np.zeros(frame.prior.basis_count))
        assert estimate_frame_scale(frame, frame, Pose.identity(), state) == pytest.approx(2.0)


def test_mapping_round_reduces_error(sweep_sequence):
    graph = KeyframeGraph()
    create_keyframe(graph, sweep_sequence[0].frame, sweep_sequence[0].pose, 1.0)
    create_keyframe(graph, sweep_sequence[4].frame, sweep_sequence[4].pose.retract(np.full(6, 2e-3)), 1.05)
    anchor = graph.poses[0]
    result = run_mapping_round(graph)
    assert result.final_error <= result.error_history[0]
    assert np.linalg.norm(graph.poses[0].translation - anchor.translation) < 1e-3
    assert graph.scales[1] > 0


class TestLoops:
    def test_reference_pair(self):
        graph = tiny_graph([0.0, 1.0, 2.0, 3.0], connect=False)
        graph.connect(3, 1, ConnectionKind.TEMPORAL)
        graph.connect(3, 2, ConnectionKind.TEMPORAL)
        graph.connect(1, 0, ConnectionKind.GLOBAL)
        assert reference_pair(graph, 3) == 2
        assert reference_pair(graph, 0) is None

    def test_nothing_to_detect_in_a_short_chain(self):
        graph = tiny_graph([0.0, 0.1])
        ctx = SlamConfig().loop_context()
        assert detect_local_loop(graph, 1, ctx) is None
        assert detect_global_loop(graph, 1, ctx) == []

    @staticmethod
    def candidate(graph, rel):
        geometry = PairGeometry(rel, 1.0, 1.0, 1.0, 1.0, 0.0, None)
        return LoopCandidate(2, 0, PairVerification(2, 0, None, geometry))

    def test_consistent_global_loop(self):
        graph = tiny_graph([0.0, 0.1, 0.2])
        before = dict(graph.poses)
        closed = close_global_loop(graph, self.candidate(graph, at_x(0.2)), SlamConfig().loop_context())
        assert closed
        assert graph.neighbors(0, ConnectionKind.GLOBAL) == [2]
        assert len(graph.factors[graph.connections[-1]]) == 2
        for kf_id, pose in before.items():
            np.testing.assert_allclose(graph.poses[kf_id].as_matrix(), pose.as_matrix(), atol=1e-9)

    def test_global_loop_pulls_drift(self):
        graph = tiny_graph([0.0, 0.1, 0.2])
        assert close_global_loop(graph, self.candidate(graph, at_x(0.15)), SlamConfig().loop_context())
        closed = graph.poses[0].inverse() @ graph.poses[2]
        assert abs(closed.translation[0] - 0.15) < abs(0.2 - 0.15)
        np.testing.assert_allclose(graph.poses[0].as_matrix(), np.eye(4), atol=1e-12)


class TestSession:
    def test_lost_frames_are_skipped(self, monkeypatch):
        def lost(*args, **kwargs):
            raise TrackingLostError("no overlap")

        camera = tiny_camera()
        system = SlamSystem()
        assert system.process(smooth_frame(0, camera)).ref == 0
        monkeypatch.setattr(pipeline, "track_frame", lost)
        assert system.process(smooth_frame(1, camera, phase=0.1)) is None
        assert system.lost_frames == [1]
        system.finish()
        assert system.trajectory().ids == [0]

    def test_keyframe_and_plain_frames(self, monkeypatch):
        camera = tiny_camera()
        outcomes = iter([
            TrackingDiagnostics(0.95, 0.95, 0.9, 0.1),
            TrackingDiagnostics(0.5, 0.5, 0.1, 3.0),
        ])

        def tracked(graph, frame, last_pose, cfg):
            rel = at_x(0.01 * frame.index)
            return TrackingOutcome(0, rel, graph.poses[0] @ rel, 1.0, next(outcomes), None)

        monkeypatch.setattr(pipeline, "track_frame", tracked)
        system = SlamSystem(SlamConfig(enable_loop_closure=False))
        for i in range(3):
            system.process(smooth_frame(i, camera, phase=0.05 * i))
        assert len(system.graph) == 2
        assert [(r.index, r.ref) for r in system.records] == [(0, 0), (1, 0), (2, 1)]
        np.testing.assert_allclose(system.records[-1].rel.as_matrix(), np.eye(4))
        assert system.graph.queried == {0}
        system.finish()
        assert system.graph.queried == {0, 1}
        assert set(system.keyframe_depths()) == {0, 2}


@pytest.mark.slow
class TestEndToEnd:
    def test_sweep(self, sweep_sequence):
        result = SlamSystem().run(f.frame for f in sweep_sequence)
        assert result.lost_frames == []
        assert result.trajectory.ids == list(range(len(sweep_sequence)))
        assert len(result.graph) >= 2
        report = metrics_report(result.trajectory, sweep_sequence.trajectory())
        assert report["ate_trans"] < 0.02
        assert set(result.timings) >= {"tracking", "keyframing", "mapping"}

    def test_deterministic(self, noisy_sequence):
        first = SlamSystem(SlamConfig(seed=3)).run(f.frame for f in noisy_sequence)
        second = SlamSystem(SlamConfig(seed=3)).run(f.frame for f in noisy_sequence)
        for a, b in zip(first.trajectory.poses, second.trajectory.poses):
            np.testing.assert_array_equal(a.as_matrix(), b.as_matrix())


@pytest.mark.slow
class TestLoopAblation:
    """A 60-frame loop yields fewer keyframes than the default global gap, so the gap is shortened."""

    @pytest.fixture(scope="class")
    def loop_sequence(self):
        return generate_sequence(SceneConfig(frames=60, trajectory="loop", depth_rel=0.02, feature_abs=0.01))

    @staticmethod
    def run_pipeline(sequence, **overrides):
        cfg = SlamConfig(loop=LoopPolicy(global_min_gap=5), **overrides)
        result = SlamSystem(cfg).run(f.frame for f in sequence)
        assert result.lost_frames == []
        return result, metrics_report(result.trajectory, sequence.trajectory())["ate_trans"]

    def test_closure_beats_open_loop(self, loop_sequence):
        _, open_ate = self.run_pipeline(loop_sequence, enable_loop_closure=False)
        closed, closed_ate = self.run_pipeline(loop_sequence)
        global_only, global_ate = self.run_pipeline(loop_sequence, enable_local_loop=False)

        assert closed_ate < 0.01 * SCENE_DIAMETER
        assert closed_ate < open_ate
        assert any(c.kind is ConnectionKind.GLOBAL for c in global_only.graph.connections)
        assert global_ate < open_ate
