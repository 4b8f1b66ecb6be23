# src/utils/file_utils.py

"""
On-disk formats: trajectories, SGDM maps, sequence manifests, keyframe
graph dumps and metric reports.
"""

import logging
import re
from pathlib import Path
from typing import Dict, List, NamedTuple

import numpy as np

from models.camera import Camera
from models.errors import DimensionMismatchError, SequenceFormatError
from models.graph import KeyframeGraph
from models.keyframe import Frame
from models.pose import Pose
from services.evaluation import Trajectory
from services.simulator import SyntheticSequence
from utils.validators import format_value, parse_key_values, require_keys

logger = logging.getLogger(__name__)

MAP_MAGIC = b"SGDM"
MANIFEST_NAME = "manifest.txt"
GROUNDTRUTH_NAME = "groundtruth.txt"
BASES_NAME = "bases.sgdm"
DEPTH_FILE_PATTERN = re.compile(r"depth_(\d+)\.sgdm$")
FRAME_FILES = ("average", "features", "descriptors", "mask", "depth")


def write_trajectory(path: str | Path, trajectory: Trajectory) -> Path:
    """One ``id tx ty tz qx qy qz qw`` line per pose, 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for index, pose in zip(trajectory.ids, trajectory.poses):
        values = np.concatenate([pose.translation, pose.quaternion()])
        lines.append(f"{index} " + " ".join(f"{v:.17g}" for v in values))
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_trajectory(path: str | Path) -> Trajectory:
    """
    Raises:
        SequenceFormatError: if the file is missing or a line is malformed
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise SequenceFormatError(f"Cannot read trajectory {path}") from e
    ids, poses = [], []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise SequenceFormatError(f"{path}:{number}: expected 8 fields, got {len(parts)}")
        try:
            ids.append(int(parts[0]))
            values = [float(p) for p in parts[1:]]
        except ValueError as e:
            raise SequenceFormatError(f"{path}:{number}: {e}") from e
        poses.append(Pose.from_quaternion(values[:3], values[3:]))
    return Trajectory(ids, poses)


def write_map(path: str | Path, values: np.ndarray) -> Path:
    """
    SGDM: magic, little-endian uint32 C, H, W, then C*H*W little-endian
    float32 values in row-major order. 2D arrays are written with C = 1.
    """
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[None]
    if values.ndim != 3:
        raise DimensionMismatchError(f"Maps must be (H, W) or (C, H, W), got shape {values.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.array(values.shape, dtype="<u4").tobytes()
    path.write_bytes(MAP_MAGIC + header + np.ascontiguousarray(values, dtype="<f4").tobytes())
    return path


def read_map(path: str | Path) -> np.ndarray:
    """
    Returns:
        (C, H, W) float32 array

    Raises:
        SequenceFormatError: on a missing file, a bad magic or a size mismatch
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise SequenceFormatError(f"Cannot read map {path}") from e
    if len(data) < 16 or data[:4] != MAP_MAGIC:
        raise SequenceFormatError(f"{path} is not an SGDM file")
    shape = tuple(int(v) for v in np.frombuffer(data, dtype="<u4", count=3, offset=4))
    expected = 16 + 4 * int(np.prod(shape))
    if len(data) != expected:
        raise SequenceFormatError(f"{path}: expected {expected} bytes for shape {shape}, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(shape)


def write_key_values(path: str | Path, pairs: Dict[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{key} = {format_value(value)}\n" for key, value in pairs.items()))
    return path


def read_key_values(path: str | Path) -> Dict[str, str]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise SequenceFormatError(f"Cannot read {path}") from e
    return parse_key_values(lines, str(path))


class LoadedSequence(NamedTuple):
    camera: Camera
    frames: List[Frame]
    groundtruth: Trajectory
    depths: Dict[int, np.ndarray]  # ground-truth depth by frame index
    masks: Dict[int, np.ndarray]


def _frame_file(index: int, kind: str) -> str:
    return f"{kind}_{index:04d}.sgdm"


def write_sequence(sequence: SyntheticSequence, out_dir: str | Path) -> Path:
    """
    Write a manifest, the shared depth bases, ground-truth poses and the
    per-frame maps into ``out_dir``.

    Returns:
        Path of the manifest
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        camera = sequence.camera
        manifest: Dict[str, object] = {
            "frames": len(sequence),
            "width": camera.width,
            "height": camera.height,
            "fx": camera.fx,
            "fy": camera.fy,
            "cx": camera.cx,
            "cy": camera.cy,
            "pyramid_levels": sequence.config.pyramid_levels,
            "basis_count": sequence.config.basis_count,
            "seed": sequence.config.seed,
            "trajectory": sequence.config.trajectory,
            "bases": BASES_NAME,
            "groundtruth": GROUNDTRUTH_NAME,
        }
        write_map(out_dir / BASES_NAME, sequence.scene.bases)
        for f in sequence.frames:
            maps = {
                "average": f.prior.average,
                "features": f.frame.features[0].values,
                "descriptors": f.frame.descriptors.values,
                "mask": f.mask.astype(float),
                "depth": f.depth,
            }
            for kind in FRAME_FILES:
                name = _frame_file(f.index, kind)
                write_map(out_dir / name, maps[kind])
                manifest[f"frame.{f.index}.{kind}"] = name
        write_trajectory(out_dir / GROUNDTRUTH_NAME, sequence.trajectory())
        path = write_key_values(out_dir / MANIFEST_NAME, manifest)
        logger.info(f"Wrote {len(sequence)} frames to {out_dir}")
        return path
    except Exception as e:
        logger.error(f"Error writing sequence to {out_dir}: {str(e)}")
        raise


def read_sequence(seq_dir: str | Path) -> LoadedSequence:
    """
    Raises:
        SequenceFormatError: if the manifest or any listed file is missing
            or malformed
    """
    seq_dir = Path(seq_dir)
    manifest_path = seq_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise SequenceFormatError(f"No {MANIFEST_NAME} in {seq_dir}")
    manifest = read_key_values(manifest_path)
    require_keys(manifest, ("frames", "width", "height", "fx", "fy", "cx", "cy", "pyramid_levels", "bases"),
                 str(manifest_path))
    try:
        camera = Camera(
            float(manifest["fx"]), float(manifest["fy"]), float(manifest["cx"]), float(manifest["cy"]),
            int(manifest["width"]), int(manifest["height"]),
        )
        count = int(manifest["frames"])
        levels = int(manifest["pyramid_levels"])
    except ValueError as e:
        raise SequenceFormatError(f"{manifest_path}: {e}") from e

    bases = read_map(seq_dir / manifest["bases"]).astype(float)
    indices = sorted({int(k.split(".")[1]) for k in manifest if k.startswith("frame.")})
    if len(indices) != count:
        raise SequenceFormatError(f"{manifest_path}: lists {len(indices)} frames, expected {count}")

    frames, depths, masks = [], {}, {}
    for index in indices:
        require_keys(manifest, [f"frame.{index}.{kind}" for kind in FRAME_FILES], str(manifest_path))
        maps = {kind: read_map(seq_dir / manifest[f"frame.{index}.{kind}"]).astype(float) for kind in FRAME_FILES}
        mask = maps["mask"][0] > 0.5
        frames.append(
            Frame.create(index, camera, maps["average"][0], bases, maps["features"], maps["descriptors"], mask, levels)
        )
        depths[index] = maps["depth"][0]
        masks[index] = mask

    groundtruth = read_trajectory(seq_dir / manifest.get("groundtruth", GROUNDTRUTH_NAME))
    logger.info(f"Read {len(frames)} frames from {seq_dir}")
    return LoadedSequence(camera, frames, groundtruth, depths, masks)


def write_graph(path: str | Path, graph: KeyframeGraph) -> Path:
    """``keyframe <id> <frame index> <scale>`` lines, then ``connection <src> <tgt> <kind>`` lines."""
    lines = [f"keyframe {k} {graph[k].frame.index} {graph.scales[k]:.17g}" for k in graph]
    lines += [f"connection {c.src} {c.tgt} {c.kind.value}" for c in graph.connections]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def find_depth_files(base_dir: str | Path) -> Dict[int, Path]:
    """
    Per-frame depth files ``depth_<frame>.sgdm`` in ``base_dir``, by frame index.

    Raises:
        FileNotFoundError: If the directory doesn't exist
    """
    try:
        base_path = Path(base_dir)
        if not base_path.exists():
            raise FileNotFoundError(f"Directory not found: {base_dir}")
        found = {}
        for path in base_path.glob("depth_*.sgdm"):
            match = DEPTH_FILE_PATTERN.search(path.name)
            if match:
                found[int(match.group(1))] = path
        if not found:
            logger.warning(f"No depth files found in {base_dir}")
        return dict(sorted(found.items()))
    except Exception as e:
        logger.error(f"Error finding depth files: {str(e)}")
        raise


def depth_file_name(index: int) -> str:
    return f"depth_{index:04d}.sgdm"
