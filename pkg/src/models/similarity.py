from dataclasses import dataclass

import numpy as np

from models.errors import InsufficientCorrespondencesError
from models.pose import Pose


@dataclass(frozen=True, eq=False)
class Similarity:
    """Similarity transform ``x -> s R x + t``."""
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "Similarity":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self) -> "Similarity":
        rt = self.rotation.T
        inv_scale = 1.0 / self.scale
        return Similarity(inv_scale, rt, -inv_scale * rt @ self.translation)

    def apply_to_pose(self, pose: Pose) -> Pose:
        """Map a camera-to-world pose into the transformed world frame."""
        return Pose(
            self.rotation @ pose.rotation,
            self.scale * self.rotation @ pose.translation + self.translation,
        )

    def as_pose(self) -> Pose:
        """Rigid part, dropping the scale."""
        return Pose(self.rotation, self.translation)


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Similarity:
    """
    Closed-form least-squares similarity mapping ``src`` onto ``dst``.

    Args:
        src: (N, 3) source points
        dst: (N, 3) target points
        with_scale: estimate the scale, otherwise fix it to 1

    Returns:
        Similarity minimising sum ||dst - (s R src + t)||^2

    Raises:
        InsufficientCorrespondencesError: fewer than 3 points or degenerate source spread
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise InsufficientCorrespondencesError(f"Point sets must be matching (N, 3) arrays, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise InsufficientCorrespondencesError(f"Need at least 3 correspondences, got {src.shape[0]}")

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    xs = src - mu_src
    xd = dst - mu_dst
    var_src = np.mean(np.sum(xs**2, axis=1))
    if var_src <= 1e-24:
        raise InsufficientCorrespondencesError("Source points are coincident")

    cov = xd.T @ xs / src.shape[0]
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rotation = u @ sign @ vt
    scale = float(np.trace(np.diag(d) @ sign) / var_src) if with_scale else 1.0
    translation = mu_dst - scale * rotation @ mu_src
    return Similarity(scale, rotation, translation)
