import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation
from typer.testing import CliRunner

from main import app
from models.similarity import Similarity
from services.evaluation import REPORT_KEYS
from utils.file_utils import read_key_values, read_trajectory, write_trajectory

runner = CliRunner()

SMALL_SCENE = """\
# small scene for quick runs
scene.frames = 6
scene.height = 32
scene.width = 40
scene.fx = 30
scene.fy = 30
scene.pyramid_levels = 3
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_SCENE)
    return path


@pytest.fixture
def sequence_dir(tmp_path, config_file):
    out = tmp_path / "seq"
    result = runner.invoke(app, ["simulate", "--out", str(out), "--config", str(config_file)])
    assert result.exit_code == 0, result.output
    return out


def test_simulate_is_deterministic(tmp_path, config_file, sequence_dir):
    again = tmp_path / "again"
    result = runner.invoke(app, ["simulate", "--out", str(again), "--config", str(config_file)])
    assert result.exit_code == 0
    for name in ("manifest.txt", "groundtruth.txt", "bases.sgdm", "depth_0003.sgdm", "descriptors_0005.sgdm"):
        assert (again / name).read_bytes() == (sequence_dir / name).read_bytes()


def test_simulate_seed_option(tmp_path, config_file, sequence_dir):
    other = tmp_path / "other"
    result = runner.invoke(app, ["simulate", "--out", str(other), "--config", str(config_file), "--seed", "5"])
    assert result.exit_code == 0
    assert read_key_values(other / "manifest.txt")["seed"] == "5"
    assert (other / "depth_0000.sgdm").read_bytes() != (sequence_dir / "depth_0000.sgdm").read_bytes()


def test_invalid_config_fails(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("scene.frames = 0\n")
    result = runner.invoke(app, ["simulate", "--out", str(tmp_path / "seq"), "--config", str(bad)])
    assert result.exit_code != 0
    assert not (tmp_path / "seq").exists()


def test_eval_report(tmp_path, sequence_dir):
    gt = read_trajectory(sequence_dir / "groundtruth.txt")
    similarity = Similarity(0.5, Rotation.from_rotvec([0.0, 0.2, 0.1]).as_matrix(), np.array([1.0, 0.0, 2.0]))
    estimate = write_trajectory(tmp_path / "est.txt", gt.transformed(similarity))
    out = tmp_path / "eval"
    result = runner.invoke(app, ["eval", str(estimate), str(sequence_dir / "groundtruth.txt"), "--out", str(out)])
    assert result.exit_code == 0, result.output
    report = read_key_values(out / "report.txt")
    assert tuple(report) == REPORT_KEYS
    assert float(report["ate_trans"]) == pytest.approx(0.0, abs=1e-6)
    assert math.isnan(float(report["ard_traj"]))
    assert "ate_trans" in result.output


def test_eval_depths_need_sequence(tmp_path, sequence_dir):
    gt = str(sequence_dir / "groundtruth.txt")
    result = runner.invoke(app, ["eval", gt, gt, "--depths", str(sequence_dir)])
    assert result.exit_code != 0


@pytest.mark.slow
def test_run_then_eval(tmp_path, sequence_dir):
    out = tmp_path / "run"
    result = runner.invoke(app, ["run", str(sequence_dir), "--out", str(out), "--disable-loop-closure"])
    assert result.exit_code == 0, result.output
    assert read_trajectory(out / "trajectory.txt").ids == list(range(6))
    assert (out / "depth_0000.sgdm").exists()
    assert (out / "graph.txt").read_text().startswith("keyframe 0 0 ")
    log = (out / "run.log").read_text()
    assert "config seed = 0" in log
    assert "config enable_loop_closure = false" in log
    assert "timing tracking" in log

    report_dir = tmp_path / "eval"
    result = runner.invoke(app, [
        "eval", str(out / "trajectory.txt"), str(sequence_dir / "groundtruth.txt"),
        "--depths", str(out), "--sequence", str(sequence_dir), "--out", str(report_dir), "--plot",
    ])
    assert result.exit_code == 0, result.output
    report = read_key_values(report_dir / "report.txt")
    assert all(math.isfinite(float(report[key])) for key in REPORT_KEYS if not key.startswith("rpe"))
    assert (report_dir / "trajectory.html").exists()


@pytest.mark.slow
def test_run_is_deterministic(tmp_path, sequence_dir):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        result = runner.invoke(app, ["run", str(sequence_dir), "--out", str(out), "--deterministic"])
        assert result.exit_code == 0, result.output
        outputs.append(out)
    first, second = outputs
    names = sorted(p.name for p in first.iterdir() if p.name != "run.log")
    assert "trajectory.txt" in names and "graph.txt" in names
    assert any(name.startswith("depth_") for name in names)
    assert names == sorted(p.name for p in second.iterdir() if p.name != "run.log")
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
