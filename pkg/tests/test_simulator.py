import numpy as np
import pytest

from models.errors import ConfigurationError, InsufficientCorrespondencesError
from services.simulator import (
    TRAJECTORIES,
    SceneConfig,
    analytic_flow,
    frustum_overlap,
    generate_sequence,
    make_mask,
    make_scene,
    make_trajectory,
    sample_training_triplet,
)
from services.warping import compute_flow

SMALL = dict(height=32, width=40, fx=30.0, fy=30.0, pyramid_levels=3)


@pytest.fixture(scope="module")
def wide_sequence():
    """Sweep long enough that the first and last views barely overlap."""
    return generate_sequence(SceneConfig(seed=3, frames=6, motion=0.6, **SMALL))


class TestConfig:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"frames": 0},
            {"height": 62},
            {"trajectory": "spiral"},
            {"mask": "square"},
            {"depth_rel": -0.1},
            {"surface_amplitude": 0.4},
        ],
    )
    def test_rejects(self, overrides):
        with pytest.raises(ConfigurationError):
            SceneConfig(**overrides)

    def test_camera_is_centred(self):
        camera = SceneConfig(**SMALL).camera()
        assert (camera.cx, camera.cy) == (19.5, 15.5)
        assert camera.shape == (32, 40)


class TestGeneration:
    def test_same_seed_same_sequence(self):
        cfg = SceneConfig(seed=5, frames=3, depth_rel=0.05, feature_abs=0.01, pose_init=0.01, **SMALL)
        a, b = generate_sequence(cfg), generate_sequence(cfg)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.depth, fb.depth)
            np.testing.assert_array_equal(fa.frame.features[0].values, fb.frame.features[0].values)
            np.testing.assert_array_equal(fa.initial_pose.as_matrix(), fb.initial_pose.as_matrix())

    def test_seed_changes_the_scene(self):
        a = generate_sequence(SceneConfig(seed=1, frames=1, **SMALL))
        b = generate_sequence(SceneConfig(seed=2, frames=1, **SMALL))
        assert not np.allclose(a[0].depth, b[0].depth)

    def test_ground_truth_code_reproduces_depth(self):
        seq = generate_sequence(SceneConfig(seed=4, frames=2, depth_rel=0.05, **SMALL))
        frame = seq[1]
        assert np.any(frame.gt_code != 0)
        np.testing.assert_allclose(frame.gt_prior.unscaled(), frame.depth, atol=1e-9)
        assert not np.allclose(frame.prior.unscaled(), frame.depth)

    def test_noise_free_prior_is_exact(self, sweep_sequence):
        frame = sweep_sequence[0]
        np.testing.assert_array_equal(frame.gt_code, 0.0)
        np.testing.assert_allclose(frame.prior.unscaled(), frame.depth, atol=1e-12)

    def test_pose_init_noise(self):
        seq = generate_sequence(SceneConfig(seed=4, frames=2, pose_init=0.02, **SMALL))
        assert not np.allclose(seq[1].initial_pose.as_matrix(), seq[1].pose.as_matrix())

    @pytest.mark.parametrize("trajectory", TRAJECTORIES)
    def test_trajectories(self, trajectory):
        cfg = SceneConfig(frames=7, trajectory=trajectory, **SMALL)
        poses = make_trajectory(cfg, np.random.default_rng(0))
        assert len(poses) == 7
        assert all(p.is_valid() for p in poses)

    def test_trajectory_ids(self, sweep_sequence):
        trajectory = sweep_sequence.trajectory()
        assert list(trajectory.ids) == list(range(len(sweep_sequence)))

    def test_scene_bases(self):
        cfg = SceneConfig(basis_count=5, **SMALL)
        scene = make_scene(cfg, np.random.default_rng(0))
        assert scene.bases.shape == (5, 32, 40)
        assert np.abs(scene.bases).max() <= 0.9


def test_circular_mask():
    mask = make_mask(SceneConfig(mask="circular"))
    assert mask.shape == (64, 80)
    assert not mask[0, 0] and not mask[-1, -1]
    assert mask[32, 40]
    assert make_mask(SceneConfig()).all()


class TestFlowAndOverlap:
    def test_analytic_flow_matches_warping(self, sweep_sequence):
        a, b = sweep_sequence[0], sweep_sequence[3]
        truth = analytic_flow(a, b)
        warped = compute_flow(a, b, b.pose.inverse() @ a.pose, a.gt_prior)
        both = truth.valid & warped.valid
        assert both.sum() > 0.9 * truth.valid.sum()
        np.testing.assert_allclose(warped.flow[:, both], truth.flow[:, both], atol=1e-6)

    def test_self_overlap(self, sweep_sequence):
        assert frustum_overlap(sweep_sequence[2], sweep_sequence[2]) == pytest.approx(1.0, abs=1e-3)

    def test_overlap_drops_with_distance(self, wide_sequence):
        first = wide_sequence[0]
        overlaps = [frustum_overlap(first, other) for other in wide_sequence.frames[1:]]
        assert overlaps[0] > overlaps[-1]
        assert overlaps[-1] < 0.6


class TestTriplets:
    def test_sample(self, wide_sequence):
        triplet = sample_training_triplet(wide_sequence, np.random.default_rng(0))
        assert frustum_overlap(triplet.src, triplet.tgt) > 0.6
        assert frustum_overlap(triplet.src, triplet.far) < 0.6
        expected = triplet.tgt.pose.inverse() @ triplet.src.pose
        np.testing.assert_allclose(triplet.gt_rel.as_matrix(), expected.as_matrix(), atol=1e-12)
        covered = compute_flow(triplet.src, triplet.tgt, triplet.init_rel, triplet.src.gt_prior).valid.sum()
        assert covered > 0.4 * triplet.src.mask.sum()

    def test_no_far_view(self, sweep_sequence):
        with pytest.raises(InsufficientCorrespondencesError):
            sample_training_triplet(sweep_sequence, np.random.default_rng(0), min_overlap=0.0)


def test_descriptors_follow_the_surface_point(sweep_sequence):
    scene = sweep_sequence.scene
    for synthetic in (sweep_sequence[0], sweep_sequence[5]):
        values = synthetic.frame.descriptors.values
        expected = scene.descriptors(synthetic.points.reshape(-1, 3)).reshape(values.shape)
        np.testing.assert_allclose(values, expected, atol=1e-12)
        assert np.all(np.abs(values) < 1.0)
        # neighbouring keypoints two pixels apart must stay distinguishable
        step = np.linalg.norm(values[:, :, 2:] - values[:, :, :-2], axis=0)
        assert np.median(step) > 0.05
