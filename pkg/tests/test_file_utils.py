from typing import Optional, Tuple

import numpy as np
import pytest

from models.errors import ConfigurationError, DimensionMismatchError, SequenceFormatError
from models.graph import ConnectionKind, KeyframeGraph
from models.pose import Pose
from services.evaluation import Trajectory
from services.simulator import SceneConfig, generate_sequence
from utils.config import RunConfig
from utils.file_utils import (
    MAP_MAGIC,
    MANIFEST_NAME,
    depth_file_name,
    find_depth_files,
    read_map,
    read_sequence,
    read_trajectory,
    write_graph,
    write_map,
    write_sequence,
    write_trajectory,
)
from utils.validators import coerce_value, format_value, parse_key_values
from tests.conftest import smooth_frame, tiny_camera


class TestTrajectoryFile:
    def test_format(self, tmp_path):
        pose = Pose.exp([0.1, -0.2, 0.3, 1.0, 2.0, 3.0])
        path = write_trajectory(tmp_path / "out" / "trajectory.txt", Trajectory([4, 9], [Pose.identity(), pose]))
        lines = path.read_text().splitlines()
        assert lines[0].split()[0] == "4"
        assert [abs(float(v)) for v in lines[0].split()[1:]] == [0, 0, 0, 0, 0, 0, 1]
        assert len(lines[1].split()) == 8
        loaded = read_trajectory(path)
        assert loaded.ids == [4, 9]
        np.testing.assert_allclose(loaded.poses[1].as_matrix(), pose.as_matrix(), atol=1e-12)

    def test_skips_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("# id tx ty tz qx qy qz qw\n\n1 0 0 0 0 0 0 1\n")
        assert read_trajectory(path).ids == [1]

    @pytest.mark.parametrize("line", ["1 0 0 0 0 0 1", "1 0 0 0 0 0 0 one", "x 0 0 0 0 0 0 1"])
    def test_malformed(self, tmp_path, line):
        path = tmp_path / "t.txt"
        path.write_text(line + "\n")
        with pytest.raises(SequenceFormatError):
            read_trajectory(path)

    def test_missing(self, tmp_path):
        with pytest.raises(SequenceFormatError):
            read_trajectory(tmp_path / "nope.txt")


class TestMapFile:
    def test_layout(self, tmp_path):
        values = np.arange(6, dtype=float).reshape(2, 3)
        data = write_map(tmp_path / "m.sgdm", values).read_bytes()
        assert data[:4] == MAP_MAGIC
        assert np.frombuffer(data, dtype="<u4", count=3, offset=4).tolist() == [1, 2, 3]
        assert len(data) == 16 + 4 * 6
        loaded = read_map(tmp_path / "m.sgdm")
        assert loaded.dtype == np.float32
        np.testing.assert_array_equal(loaded, values[None])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.sgdm"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(SequenceFormatError):
            read_map(path)

    def test_truncated(self, tmp_path):
        path = write_map(tmp_path / "m.sgdm", np.ones((2, 4, 4)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(SequenceFormatError):
            read_map(path)

    def test_rejects_vectors(self, tmp_path):
        with pytest.raises(DimensionMismatchError):
            write_map(tmp_path / "m.sgdm", np.ones(5))


class TestKeyValues:
    def test_parse(self):
        pairs = parse_key_values(["# header", "", "a = 1  # note", "b.c=two words"])
        assert pairs == {"a": "1", "b.c": "two words"}

    @pytest.mark.parametrize("lines", [["no separator"], ["= 3"], ["a = 1", "a = 2"]])
    def test_malformed(self, lines):
        with pytest.raises(SequenceFormatError):
            parse_key_values(lines)

    @pytest.mark.parametrize(
        "text, annotation, expected",
        [
            ("yes", bool, True),
            ("Off", bool, False),
            ("3", int, 3),
            ("1e-4", float, 1e-4),
            ("none", Optional[int], None),
            ("5", Optional[int], 5),
            ("1, 2.5", Tuple[float, ...], (1.0, 2.5)),
            ("0.5, 0.4", Tuple[float, float], (0.5, 0.4)),
        ],
    )
    def test_coerce(self, text, annotation, expected):
        assert coerce_value("k", text, annotation) == expected

    @pytest.mark.parametrize(
        "text, annotation",
        [("maybe", bool), ("3.5", int), ("nan", float), ("1", Tuple[float, float]), ("{}", dict)],
    )
    def test_coerce_errors(self, text, annotation):
        with pytest.raises(ConfigurationError):
            coerce_value("k", text, annotation)

    def test_format(self):
        assert [format_value(v) for v in (True, None, (10.0, 9.0), 0.1, 3, "sweep")] == [
            "true", "none", "10.0, 9.0", "0.1", "3", "sweep"
        ]


class TestRunConfig:
    def test_keys(self):
        keys = RunConfig().keys()
        for key in ("tracking.lm.damp_init", "keyframe.max_overlap_area", "loop.min_overlap",
                    "weights.fm_levels", "seed", "scene.frames", "eval.rpe_interval"):
            assert key in keys
        assert "tracking.lm.relinearize_thresholds" not in keys

    def test_apply(self):
        config = RunConfig().apply({
            "scene.frames": "5",
            "keyframe.max_overlap_area": "0.7",
            "weights.fm_levels": "1, 2, 3, 4",
            "enable_local_loop": "false",
        })
        assert config.scene.frames == 5
        assert config.slam.keyframe.max_overlap_area == 0.7
        assert config.slam.weights.fm_levels == (1.0, 2.0, 3.0, 4.0)
        assert config.slam.enable_local_loop is False

    @pytest.mark.parametrize(
        "overrides",
        [
            {"tracking.lm.bogus": "1"},
            {"scene.frames": "many"},
            {"scene.frames": "0"},
            {"tracking.use_fm": "false", "tracking.use_rp": "false"},
            {"tracking.lm.damp_init": "1.0"},
        ],
    )
    def test_rejects(self, overrides):
        with pytest.raises(ConfigurationError):
            RunConfig().apply(overrides)

    def test_dump_then_load(self, tmp_path):
        config = RunConfig().apply({"scene.trajectory": "loop", "loop.min_overlap": "0.4, 0.3", "seed": "9"})
        path = tmp_path / "run.cfg"
        path.write_text(config.dump())
        assert RunConfig.load(path).flatten() == config.flatten()

    def test_load(self, tmp_path):
        assert RunConfig.load().flatten() == RunConfig().flatten()
        with pytest.raises(ConfigurationError):
            RunConfig.load(tmp_path / "missing.cfg")
        bad = tmp_path / "bad.cfg"
        bad.write_text("scene.frames 3\n")
        with pytest.raises(ConfigurationError):
            RunConfig.load(bad)


class TestSequenceFiles:
    @pytest.fixture(scope="class")
    def sequence(self):
        return generate_sequence(
            SceneConfig(seed=2, frames=2, height=32, width=40, fx=30.0, fy=30.0, pyramid_levels=3, depth_rel=0.02)
        )

    def test_write_then_read(self, tmp_path, sequence):
        manifest = write_sequence(sequence, tmp_path)
        assert manifest.name == MANIFEST_NAME
        loaded = read_sequence(tmp_path)
        assert loaded.camera == sequence.camera
        assert [f.index for f in loaded.frames] == [0, 1]
        assert loaded.groundtruth.ids == [0, 1]
        original = sequence[1]
        np.testing.assert_allclose(loaded.depths[1], original.depth, rtol=1e-6)
        np.testing.assert_allclose(loaded.frames[1].prior.average, original.prior.average, rtol=1e-6)
        np.testing.assert_allclose(loaded.frames[1].prior.bases, original.prior.bases, atol=1e-6)
        np.testing.assert_allclose(loaded.frames[1].descriptors.values, original.frame.descriptors.values, atol=1e-6)
        assert loaded.frames[1].features.level_count == 3
        np.testing.assert_array_equal(loaded.masks[0], original.mask)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(SequenceFormatError):
            read_sequence(tmp_path)

    def test_frame_count_mismatch(self, tmp_path, sequence):
        manifest = write_sequence(sequence, tmp_path)
        manifest.write_text(manifest.read_text().replace("frames = 2", "frames = 3"))
        with pytest.raises(SequenceFormatError):
            read_sequence(tmp_path)


def test_write_graph(tmp_path):
    camera = tiny_camera()
    graph = KeyframeGraph()
    for i in range(2):
        graph.add_keyframe(smooth_frame(3 * i, camera), Pose.identity(), 1.0 + i, np.zeros(3), np.zeros(1))
    graph.connect(1, 0, ConnectionKind.TEMPORAL)
    text = write_graph(tmp_path / "graph.txt", graph).read_text()
    assert text.splitlines() == ["keyframe 0 0 1", "keyframe 1 3 2", "connection 1 0 temporal"]


class TestDepthFiles:
    def test_finds_by_index(self, tmp_path):
        for index in (3, 1):
            write_map(tmp_path / depth_file_name(index), np.ones((2, 2)))
        (tmp_path / "notes.txt").write_text("x")
        found = find_depth_files(tmp_path)
        assert list(found) == [1, 3]
        assert found[3].name == "depth_0003.sgdm"

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            find_depth_files(tmp_path / "absent")
