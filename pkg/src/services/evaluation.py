"""Trajectory alignment and the trajectory and depth accuracy metrics."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import plotly.graph_objects as go

from models.errors import DimensionMismatchError, DomainError, InsufficientCorrespondencesError
from models.pose import Pose, rotation_angle
from models.similarity import Similarity, umeyama_alignment

logger = logging.getLogger(__name__)

RPE_INTERVAL = 7
DEPTH_THRESHOLDS = (1.25, 1.25**2)
REPORT_KEYS = (
    "ate_trans",
    "ate_rot",
    "rpe_trans",
    "rpe_rot",
    "ard_traj",
    "ard_frame",
    "thresh_traj_1.25",
    "thresh_frame_1.25",
    "thresh_traj_1.5625",
    "thresh_frame_1.5625",
)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Camera-to-world poses keyed by strictly increasing frame ids."""
    ids: List[int]
    poses: List[Pose]

    def __post_init__(self):
        ids = [int(i) for i in self.ids]
        if len(ids) != len(self.poses):
            raise DimensionMismatchError(f"{len(ids)} ids for {len(self.poses)} poses")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise DomainError("Trajectory ids must be strictly increasing")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "poses", list(self.poses))

    def __len__(self) -> int:
        return len(self.ids)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def subset(self, ids: Sequence[int]) -> "Trajectory":
        lookup = dict(zip(self.ids, self.poses))
        return Trajectory(list(ids), [lookup[i] for i in ids])

    def transformed(self, transform: Similarity) -> "Trajectory":
        return Trajectory(self.ids, [transform.apply_to_pose(p) for p in self.poses])


class Alignment(NamedTuple):
    est: Trajectory  # aligned, restricted to common ids
    gt: Trajectory
    transform: Similarity


class PoseErrors(NamedTuple):
    rot: float  # degrees
    trans: float


class DepthMetrics(NamedTuple):
    ard: float
    thresholds: Dict[float, float]


def sync_and_align(est: Trajectory, gt: Trajectory) -> Alignment:
    """
    Pair poses by id and align the estimate onto the ground truth with a
    least-squares similarity transform.

    Raises:
        InsufficientCorrespondencesError: if fewer than 3 ids are shared
    """
    common = sorted(set(est.ids) & set(gt.ids))
    if len(common) < 3:
        raise InsufficientCorrespondencesError(f"Only {len(common)} poses share ids with the ground truth")
    est_common = est.subset(common)
    gt_common = gt.subset(common)
    transform = umeyama_alignment(est_common.positions(), gt_common.positions())
    logger.debug(f"Aligned {len(common)} poses with scale {transform.scale:.6g}")
    return Alignment(est_common.transformed(transform), gt_common, transform)


def _rmse(values: Sequence[float]) -> float:
    return float(np.sqrt(np.mean(np.square(values))))


def ate(est: Trajectory, gt: Trajectory) -> PoseErrors:
    """
    RMSE of the rotation angle and translation of ``T_gt * T_est^-1``.

    Raises:
        DomainError: on an empty pairing
    """
    if len(est) == 0 or len(est) != len(gt):
        raise DomainError(f"ATE needs paired non-empty trajectories, got {len(est)} and {len(gt)}")
    rot, trans = [], []
    for p, g in zip(est.poses, gt.poses):
        error = g @ p.inverse()
        rot.append(np.degrees(rotation_angle(error.rotation)))
        trans.append(np.linalg.norm(error.translation))
    return PoseErrors(_rmse(rot), _rmse(trans))


def rpe(est: Trajectory, gt: Trajectory, delta: int = RPE_INTERVAL) -> PoseErrors:
    """
    RMSE of the relative motion error over ``delta`` frames.

    Raises:
        DomainError: if the trajectories are not longer than ``delta``
    """
    n = len(est)
    if n != len(gt):
        raise DomainError(f"RPE needs paired trajectories, got {n} and {len(gt)}")
    if n <= delta:
        raise DomainError(f"RPE with interval {delta} needs more than {delta} poses, got {n}")
    rot, trans = [], []
    for i in range(n - delta):
        gt_motion = gt.poses[i].between(gt.poses[i + delta])
        est_motion = est.poses[i].between(est.poses[i + delta])
        error = gt_motion.inverse() @ est_motion
        rot.append(np.degrees(rotation_angle(error.rotation)))
        trans.append(np.linalg.norm(error.translation))
    return PoseErrors(_rmse(rot), _rmse(trans))


def depth_metrics(
    est_depths: Sequence[np.ndarray],
    gt_depths: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    scaling: str = "trajectory",
    scale: float = 1.0,
    thresholds: Sequence[float] = DEPTH_THRESHOLDS,
) -> DepthMetrics:
    """
    ARD and threshold accuracy averaged over frames.

    With ``scaling="trajectory"`` every estimate is multiplied by ``scale``;
    with ``scaling="frame"`` each estimate is multiplied by the median of
    its ground-truth to estimate ratios.

    Raises:
        DomainError: if no frame has a valid pixel or ``scaling`` is unknown
    """
    if scaling not in ("trajectory", "frame"):
        raise DomainError(f"Unknown depth scaling {scaling!r}")
    if not len(est_depths) == len(gt_depths) == len(masks):
        raise DimensionMismatchError("Depth, ground truth and mask counts differ")

    ards = []
    fractions: Dict[float, list] = {t: [] for t in thresholds}
    for est, gt, mask in zip(est_depths, gt_depths, masks):
        valid = np.asarray(mask, dtype=bool) & (gt > 0) & (est > 0)
        if not valid.any():
            continue
        d, g = est[valid], gt[valid]
        d = d * (scale if scaling == "trajectory" else float(np.median(g / d)))
        ards.append(np.mean(np.abs(d - g) / g))
        ratio = np.maximum(d / g, g / d)
        for t in thresholds:
            fractions[t].append(np.mean(ratio < t))
    if not ards:
        raise DomainError("No frame has a valid depth pixel")
    return DepthMetrics(float(np.mean(ards)), {t: float(np.mean(v)) for t, v in fractions.items()})


def metrics_report(
    est: Trajectory,
    gt: Trajectory,
    est_depths: Optional[Sequence[np.ndarray]] = None,
    gt_depths: Optional[Sequence[np.ndarray]] = None,
    masks: Optional[Sequence[np.ndarray]] = None,
    delta: int = RPE_INTERVAL,
) -> Dict[str, float]:
    """Every report key; depth entries are NaN when no depths are given."""
    alignment = sync_and_align(est, gt)
    ate_errors = ate(alignment.est, alignment.gt)
    rpe_errors = rpe(alignment.est, alignment.gt, delta) if len(alignment.est) > delta else PoseErrors(np.nan, np.nan)
    report = {
        "ate_trans": ate_errors.trans,
        "ate_rot": ate_errors.rot,
        "rpe_trans": rpe_errors.trans,
        "rpe_rot": rpe_errors.rot,
    }
    if est_depths:
        traj = depth_metrics(est_depths, gt_depths, masks, "trajectory", alignment.transform.scale)
        frame = depth_metrics(est_depths, gt_depths, masks, "frame")
        report["ard_traj"] = traj.ard
        report["ard_frame"] = frame.ard
        for theta in DEPTH_THRESHOLDS:
            label = f"{theta:g}"
            report[f"thresh_traj_{label}"] = traj.thresholds[theta]
            report[f"thresh_frame_{label}"] = frame.thresholds[theta]
    else:
        for key in REPORT_KEYS[4:]:
            report[key] = np.nan
    return {key: float(report[key]) for key in REPORT_KEYS}


def format_report(report: Dict[str, float]) -> str:
    width = max(len(k) for k in report)
    return "\n".join(f"{key:<{width}}  {value:.6f}" for key, value in report.items())


def plot_trajectories(est: Trajectory, gt: Trajectory, path: Path | str, title: str = "Trajectory") -> Path:
    """Write an interactive 3D plot of the aligned estimate and the ground truth."""
    alignment = sync_and_align(est, gt)
    fig = go.Figure()
    for name, traj, color in (("ground truth", alignment.gt, "black"), ("estimate", alignment.est, "royalblue")):
        xyz = traj.positions()
        fig.add_trace(
            go.Scatter3d(x=xyz[:, 0], y=xyz[:, 1], z=xyz[:, 2], mode="lines+markers", name=name,
                         line=dict(color=color, width=3), marker=dict(size=2), text=[str(i) for i in traj.ids])
        )
    fig.update_layout(title=title, scene=dict(aspectmode="data"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path))
    logger.info(f"Trajectory plot written to {path}")
    return path
