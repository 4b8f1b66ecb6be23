"""
Synthetic endoscopy-like sequences with exact ground truth.

The scene is a smooth wall ``z = h(x, y)`` roughly ``mean_depth`` in front
of the cameras. Feature and descriptor maps are functions of the 3D
surface point, so they agree across views. Depth priors are built so that
a known code reproduces the true depth.
"""

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from models.camera import Camera
from models.dense_map import footprint_valid
from models.depth import DepthPrior
from models.errors import ConfigurationError, InsufficientCorrespondencesError, NoOverlapError
from models.keyframe import DEFAULT_PYRAMID_LEVELS, Frame
from models.pose import Pose
from services.evaluation import Trajectory
from services.warping import FlowField, compute_flow

logger = logging.getLogger(__name__)

TRAJECTORIES = ("orbit", "sweep", "loop", "random-walk")
MASKS = ("full", "circular")
SCENE_DIAMETER = 1.0
SURFACE_WAVES = 3
DESCRIPTOR_TERMS = 3
NEWTON_STEPS = 30


@dataclass
class SceneConfig:
    seed: int = 0
    height: int = 64
    width: int = 80
    fx: float = 60.0
    fy: float = 60.0
    frames: int = 30
    trajectory: str = "sweep"
    basis_count: int = 8
    feature_channels: int = 8
    descriptor_channels: int = 16
    pyramid_levels: int = DEFAULT_PYRAMID_LEVELS
    depth_rel: float = 0.0
    feature_abs: float = 0.0
    pose_init: float = 0.0
    mask: str = "full"
    mean_depth: float = 0.6
    surface_amplitude: float = 0.05
    motion: float = 0.3

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.frames < 1:
            raise ConfigurationError(f"frames must be at least 1, got {self.frames}")
        factor = 2 ** (self.pyramid_levels - 1)
        if self.height % factor or self.width % factor:
            raise ConfigurationError(
                f"Resolution {self.height}x{self.width} must be divisible by {factor} for {self.pyramid_levels} levels"
            )
        if self.trajectory not in TRAJECTORIES:
            raise ConfigurationError(f"Unknown trajectory {self.trajectory!r}, expected one of {TRAJECTORIES}")
        if self.mask not in MASKS:
            raise ConfigurationError(f"Unknown mask {self.mask!r}, expected one of {MASKS}")
        if min(self.depth_rel, self.feature_abs, self.pose_init, self.surface_amplitude) < 0:
            raise ConfigurationError("Noise levels and surface amplitude must be non-negative")
        if self.basis_count < 1 or self.feature_channels < 1 or self.descriptor_channels < 1:
            raise ConfigurationError("Basis and channel counts must be positive")
        if self.surface_amplitude >= 0.5 * self.mean_depth:
            raise ConfigurationError("Surface amplitude must stay well below the mean depth")

    def camera(self) -> Camera:
        return Camera(
            self.fx, self.fy, (self.width - 1) / 2.0, (self.height - 1) / 2.0, self.width, self.height
        )


@dataclass(frozen=True, eq=False)
class Scene:
    """Surface, appearance and depth-basis parameters drawn from one seed."""
    mean_depth: float
    wave_vectors: np.ndarray  # (S, 2)
    wave_amplitudes: np.ndarray  # (S,)
    wave_phases: np.ndarray  # (S,)
    feature_freqs: np.ndarray  # (Cf, 3)
    feature_phases: np.ndarray  # (Cf,)
    descriptor_freqs: np.ndarray  # (Cd, T, 3)
    descriptor_phases: np.ndarray  # (Cd, T)
    bases: np.ndarray  # (B, H, W)

    def surface(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Height and its (x, y) gradient at (N, 2) wall coordinates."""
        arg = xy @ self.wave_vectors.T + self.wave_phases
        height = self.mean_depth + np.sin(arg) @ self.wave_amplitudes
        gradient = (np.cos(arg) * self.wave_amplitudes) @ self.wave_vectors
        return height, gradient

    def intersect(self, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Ray parameter ``lam`` with ``origin + lam * direction`` on the surface."""
        lam = (self.mean_depth - origin[2]) / directions[:, 2]
        for _ in range(NEWTON_STEPS):
            points = origin + lam[:, None] * directions
            height, gradient = self.surface(points[:, :2])
            residual = points[:, 2] - height
            slope = directions[:, 2] - np.sum(gradient * directions[:, :2], axis=1)
            lam = lam - residual / slope
        return lam

    def features(self, points: np.ndarray) -> np.ndarray:
        """(Cf, N) smooth feature values."""
        return np.sin(self.feature_freqs @ points.T + self.feature_phases[:, None])

    def descriptors(self, points: np.ndarray) -> np.ndarray:
        """(Cd, N) descriptor values in (-1, 1)."""
        arg = np.einsum("ctk,nk->ctn", self.descriptor_freqs, points) + self.descriptor_phases[:, :, None]
        return np.tanh(1.5 * np.sin(arg).sum(axis=1) / np.sqrt(self.descriptor_freqs.shape[1]))


def _random_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    v = rng.normal(size=(count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    wave_vectors = _random_directions(rng, SURFACE_WAVES, 2) * rng.uniform(3.0, 6.0, (SURFACE_WAVES, 1))
    feature_freqs = _random_directions(rng, cfg.feature_channels, 3) * rng.uniform(6.0, 10.0, (cfg.feature_channels, 1))
    descriptor_freqs = _random_directions(rng, cfg.descriptor_channels * DESCRIPTOR_TERMS, 3).reshape(
        cfg.descriptor_channels, DESCRIPTOR_TERMS, 3
    ) * rng.uniform(15.0, 30.0, (cfg.descriptor_channels, DESCRIPTOR_TERMS, 1))

    rows, cols = np.mgrid[0:cfg.height, 0:cfg.width]
    u, v = cols / cfg.width, rows / cfg.height
    freq = rng.integers(0, 3, size=(cfg.basis_count, 2))
    freq[np.all(freq == 0, axis=1)] = (1, 1)
    phase = rng.uniform(0, 2 * np.pi, cfg.basis_count)
    bases = 0.9 * np.sin(np.pi * (freq[:, 0, None, None] * u + freq[:, 1, None, None] * v) + phase[:, None, None])

    return Scene(
        mean_depth=cfg.mean_depth,
        wave_vectors=wave_vectors,
        wave_amplitudes=np.full(SURFACE_WAVES, cfg.surface_amplitude / SURFACE_WAVES),
        wave_phases=rng.uniform(0, 2 * np.pi, SURFACE_WAVES),
        feature_freqs=feature_freqs,
        feature_phases=rng.uniform(0, 2 * np.pi, cfg.feature_channels),
        descriptor_freqs=descriptor_freqs,
        descriptor_phases=rng.uniform(0, 2 * np.pi, (cfg.descriptor_channels, DESCRIPTOR_TERMS)),
        bases=bases,
    )


def make_mask(cfg: SceneConfig) -> np.ndarray:
    if cfg.mask == "full":
        return np.ones((cfg.height, cfg.width), dtype=bool)
    rows, cols = np.mgrid[0:cfg.height, 0:cfg.width]
    cx, cy = (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0
    radius = 0.5 * min(cfg.height, cfg.width) + 4.0
    return (cols - cx) ** 2 + (rows - cy) ** 2 <= radius**2


def _euler(angles_deg) -> np.ndarray:
    return Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix()


def make_trajectory(cfg: SceneConfig, rng: np.random.Generator) -> List[Pose]:
    """Camera-to-world poses looking along +z at the wall."""
    n = cfg.frames
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    half = 0.5 * cfg.motion
    poses = []
    if cfg.trajectory == "sweep":
        for t in s:
            x = -half + cfg.motion * t
            poses.append(Pose(_euler([0.0, 2.0 * np.sin(2 * np.pi * t), 0.0]), [x, 0.02 * np.sin(np.pi * t), 0.0]))
    elif cfg.trajectory == "orbit":
        radius = 0.25 * cfg.motion
        for t in s:
            a = np.pi * t
            position = np.array([radius * np.cos(a), radius * np.sin(a), 0.0])
            tilt = np.degrees(np.arctan2(position[:2], cfg.mean_depth))
            poses.append(Pose(_euler([tilt[1], -tilt[0], 0.0]), position))
    elif cfg.trajectory == "loop":
        radius = cfg.motion / 3.0
        angles = 2 * np.pi * np.arange(n) / n
        for a in angles:
            position = np.array([radius * (np.cos(a) - 1.0), radius * np.sin(a), 0.02 * np.sin(2 * a)])
            poses.append(Pose(_euler([3.0 * np.sin(a), 3.0 * np.cos(a) - 3.0, 0.0]), position))
    else:
        position = np.zeros(3)
        angles = np.zeros(3)
        step = cfg.motion / max(n - 1, 1)
        for _ in range(n):
            poses.append(Pose(_euler(angles), position))
            position = np.clip(position + rng.normal(0.0, step, 3) * [1.0, 1.0, 0.3], -half, half)
            angles = np.clip(angles + rng.normal(0.0, 1.0, 3), -5.0, 5.0)
    return poses


@dataclass(frozen=True, eq=False)
class SyntheticFrame:
    index: int
    pose: Pose  # ground-truth camera-to-world
    depth: np.ndarray  # (H, W) ground-truth depth
    points: np.ndarray  # (H, W, 3) world points
    frame: Frame
    gt_code: np.ndarray
    initial_pose: Pose

    @property
    def mask(self) -> np.ndarray:
        return self.frame.mask

    @property
    def camera(self) -> Camera:
        return self.frame.camera

    @property
    def prior(self) -> DepthPrior:
        return self.frame.prior

    @property
    def gt_prior(self) -> DepthPrior:
        return self.frame.prior.with_state(1.0, self.gt_code)


@dataclass
class SyntheticSequence:
    config: SceneConfig
    camera: Camera
    scene: Scene
    frames: List[SyntheticFrame] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index: int) -> SyntheticFrame:
        return self.frames[index]

    def trajectory(self) -> Trajectory:
        return Trajectory([f.index for f in self.frames], [f.pose for f in self.frames])


def render_frame(
    cfg: SceneConfig,
    scene: Scene,
    camera: Camera,
    pose: Pose,
    index: int,
    rng: np.random.Generator,
    mask: Optional[np.ndarray] = None,
) -> SyntheticFrame:
    """Ground truth and network-style outputs seen from ``pose``."""
    mask = make_mask(cfg) if mask is None else mask
    rays = camera.rays(camera.pixel_grid())
    directions = rays @ pose.rotation.T
    depth = scene.intersect(pose.translation, directions)
    if np.any(depth <= 0):
        raise ConfigurationError(f"Frame {index} sees the surface behind the camera")
    points = pose.translation + depth[:, None] * directions

    shape = camera.shape
    features = scene.features(points).reshape(-1, *shape)
    descriptors = scene.descriptors(points).reshape(-1, *shape)
    if cfg.feature_abs > 0:
        features = features + rng.normal(0.0, cfg.feature_abs, features.shape)
        descriptors = np.clip(descriptors + rng.normal(0.0, cfg.feature_abs, descriptors.shape), -0.999, 0.999)

    depth = depth.reshape(shape)
    gt_code = rng.normal(0.0, cfg.depth_rel * cfg.mean_depth, cfg.basis_count) / np.sqrt(cfg.basis_count)
    average = depth - np.tensordot(gt_code, scene.bases, axes=1)
    frame = Frame.create(index, camera, average, scene.bases, features, descriptors, mask, cfg.pyramid_levels)

    initial = pose
    if cfg.pose_init > 0:
        initial = pose.retract(rng.normal(0.0, cfg.pose_init, 6))
    return SyntheticFrame(index, pose, depth, points.reshape(*shape, 3), frame, gt_code, initial)


def generate_sequence(cfg: SceneConfig) -> SyntheticSequence:
    """Deterministic sequence for ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    camera = cfg.camera()
    scene = make_scene(cfg, rng)
    mask = make_mask(cfg)
    poses = make_trajectory(cfg, rng)
    sequence = SyntheticSequence(cfg, camera, scene)
    for index, pose in enumerate(poses):
        sequence.frames.append(render_frame(cfg, scene, camera, pose, index, rng, mask))
    logger.info(f"Generated {cfg.trajectory} sequence with {cfg.frames} frames (seed {cfg.seed})")
    return sequence


def analytic_flow(a: SyntheticFrame, b: SyntheticFrame) -> FlowField:
    """Ground-truth flow from the world points of ``a`` into ``b``."""
    camera = a.camera
    rows, cols = np.nonzero(a.mask)
    local_points = (a.points[rows, cols] - b.pose.translation) @ b.pose.rotation
    z = local_points[:, 2]
    in_front = z > 1e-9
    safe_z = np.where(in_front, z, 1.0)
    projected = np.stack(
        [camera.fx * local_points[:, 0] / safe_z + camera.cx, camera.fy * local_points[:, 1] / safe_z + camera.cy],
        axis=1,
    )
    valid_points = in_front & footprint_valid(b.mask, projected)

    flow = np.zeros((2, *camera.shape))
    valid = np.zeros(camera.shape, dtype=bool)
    r, c = rows[valid_points], cols[valid_points]
    flow[0, r, c] = projected[valid_points, 0] - c
    flow[1, r, c] = projected[valid_points, 1] - r
    valid[r, c] = True
    return FlowField(flow, valid, 0)


def frustum_overlap(a: SyntheticFrame, b: SyntheticFrame) -> float:
    """Fraction of ``a``'s mask whose surface point is seen inside ``b``'s mask."""
    return float(analytic_flow(a, b).valid.sum()) / float(a.mask.sum())


class TrainingTriplet(NamedTuple):
    src: SyntheticFrame
    tgt: SyntheticFrame
    far: SyntheticFrame
    gt_rel: Pose  # source camera in target coordinates
    init_rel: Pose


def sample_training_triplet(
    sequence: SyntheticSequence,
    rng: np.random.Generator,
    min_overlap: float = 0.6,
    init_overlap: float = 0.4,
    init_noise: float = 0.05,
    attempts: int = 50,
) -> TrainingTriplet:
    """
    Source and target views overlapping by more than ``min_overlap``, a far
    view overlapping the source by less, and a perturbed initial relative
    pose whose overlap stays above ``init_overlap``.

    Raises:
        InsufficientCorrespondencesError: if the sequence has no such triplet
    """
    n = len(sequence)
    for src_index in rng.permutation(n):
        src = sequence[src_index]
        overlaps = np.array([frustum_overlap(src, f) if f.index != src.index else -1.0 for f in sequence.frames])
        near = np.nonzero(overlaps > min_overlap)[0]
        far = np.nonzero((overlaps < min_overlap) & (overlaps >= 0))[0]
        if len(near) == 0 or len(far) == 0:
            continue
        tgt = sequence[int(rng.choice(near))]
        far_frame = sequence[int(rng.choice(far))]
        gt_rel = tgt.pose.inverse() @ src.pose

        sigma = init_noise
        for _ in range(attempts):
            init_rel = gt_rel.retract(rng.normal(0.0, sigma, 6))
            try:
                covered = compute_flow(src, tgt, init_rel, src.gt_prior).valid.sum()
            except NoOverlapError:
                covered = 0
            if covered > init_overlap * src.mask.sum():
                return TrainingTriplet(src, tgt, far_frame, gt_rel, init_rel)
            sigma *= 0.8
        return TrainingTriplet(src, tgt, far_frame, gt_rel, gt_rel)
    raise InsufficientCorrespondencesError("No source frame has both a near and a far partner")

