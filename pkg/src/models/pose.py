"""SE(3) poses and the SO(3)/SE(3) exponential and logarithm maps.

Tangent vectors are ordered ``(omega, v)``: rotation first, translation
second. Poses are perturbed on the right, ``T * exp(delta)``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

# Below this angle the maps switch to their Taylor expansions.
SMALL_ANGLE = 1e-6
# Within this distance of pi the logarithm reads the axis off R + R^T.
NEAR_PI = 1e-3


def skew(w: np.ndarray) -> np.ndarray:
    """Return the 3x3 cross-product matrix of ``w``."""
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula with a second-order Taylor branch near zero."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + w + 0.5 * (w @ w)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * w + b * (w @ w)


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """
    Axis-angle vector of a rotation matrix.

    The norm of the result is the geodesic angle in ``[0, pi]``.

    Args:
        rotation: 3x3 orthonormal matrix

    Returns:
        3-vector ``omega`` with ``so3_exp(omega) == rotation``
    """
    r = np.asarray(rotation, dtype=float)
    half_vee = 0.5 * vee(r - r.T)
    sin_theta = np.linalg.norm(half_vee)
    cos_theta = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    theta = np.arctan2(sin_theta, cos_theta)

    if theta < SMALL_ANGLE:
        return half_vee * (1.0 + theta**2 / 6.0)

    if np.pi - theta < NEAR_PI:
        # (R + R^T)/2 = cos(theta) I + (1 - cos(theta)) n n^T
        nnt = (0.5 * (r + r.T) - cos_theta * np.eye(3)) / (1.0 - cos_theta)
        k = int(np.argmax(np.diag(nnt)))
        axis = nnt[:, k] / np.sqrt(nnt[k, k])
        axis /= np.linalg.norm(axis)
        if sin_theta > 0.0 and axis @ half_vee < 0.0:
            axis = -axis
        return theta * axis

    return half_vee * (theta / sin_theta)


def so3_right_jacobian_inverse(omega: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: ``log(exp(omega) exp(d)) ~ omega + Jr^-1 d``."""
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0
    else:
        coeff = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * w + coeff * (w @ w)


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * w + (w @ w) / 6.0
    b = (1.0 - np.cos(theta)) / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * w + c * (w @ w)


def _left_jacobian_inverse(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0
    else:
        coeff = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * w + coeff * (w @ w)


@dataclass(frozen=True, eq=False)
class Pose:
    """
    Rigid transform ``x -> R x + t``.

    A pose named ``T_a_b`` maps coordinates of frame ``b`` into frame ``a``.
    """
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=float).reshape(3, 3)
        translation = np.array(self.translation, dtype=float).reshape(3)
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def exp(cls, xi: np.ndarray) -> "Pose":
        """SE(3) exponential of a twist ``(omega, v)``."""
        xi = np.asarray(xi, dtype=float)
        omega, v = xi[:3], xi[3:]
        return cls(so3_exp(omega), _left_jacobian(omega) @ v)

    @classmethod
    def from_quaternion(cls, translation, quaternion_xyzw) -> "Pose":
        rotation = Rotation.from_quat(np.asarray(quaternion_xyzw, dtype=float)).as_matrix()
        return cls(rotation, translation)

    def log(self) -> np.ndarray:
        omega = so3_log(self.rotation)
        return np.concatenate([omega, _left_jacobian_inverse(omega) @ self.translation])

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def between(self, other: "Pose") -> "Pose":
        """``self^-1 * other``."""
        return self.inverse() @ other

    def act(self, points: np.ndarray) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def retract(self, delta: np.ndarray) -> "Pose":
        return self @ Pose.exp(delta)

    def local(self, other: "Pose") -> np.ndarray:
        """Right-perturbation coordinates taking ``self`` to ``other``."""
        return self.between(other).log()

    def scaled(self, factor: float) -> "Pose":
        """Same rotation, translation multiplied by ``factor``."""
        return Pose(self.rotation, factor * self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r @ r.T, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic angle of a rotation in radians."""
    return float(np.linalg.norm(so3_log(rotation)))


def pose_distance(a: Pose, b: Pose, rot_weight: float = 1.0, trans_weight: float = 1.0) -> float:
    """Weighted geodesic rotation angle plus Euclidean distance of camera centres."""
    angle = rotation_angle(a.rotation.T @ b.rotation)
    return rot_weight * angle + trans_weight * float(np.linalg.norm(a.translation - b.translation))
