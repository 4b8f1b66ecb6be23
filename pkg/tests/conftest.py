import numpy as np
import pytest

from models.camera import Camera
from models.keyframe import Frame
from models.pose import Pose
from models.variables import POSE, SCALE
from services.simulator import SceneConfig, generate_sequence


def tiny_camera() -> Camera:
    """8 x 10 pinhole camera used by the brute-force and finite-difference tests."""
    return Camera(fx=9.0, fy=9.0, cx=4.5, cy=3.5, width=10, height=8)


def smooth_frame(
    index: int,
    camera: Camera,
    phase: float = 0.0,
    basis_count: int = 3,
    levels: int = 2,
    depth: float = 1.0,
    mask: np.ndarray | None = None,
) -> Frame:
    """Frame whose maps are smooth trigonometric fields over the pixel grid."""
    rows, cols = np.mgrid[0:camera.height, 0:camera.width].astype(float)
    average = depth * (1.0 + 0.08 * np.sin(0.5 * cols + 0.3 * rows + phase))
    bases = np.stack([0.8 * np.sin(0.4 * (k + 1) * cols - 0.3 * k * rows + phase) for k in range(basis_count)])
    features = np.stack([np.sin(0.6 * cols + 0.45 * (k + 1) * rows + k + phase) for k in range(4)])
    descriptors = np.tanh(np.stack([np.sin(0.9 * (k + 1) * cols - 0.7 * rows + 2 * k + phase) for k in range(6)]))
    mask = np.ones(camera.shape, dtype=bool) if mask is None else mask
    return Frame.create(index, camera, average, bases, features, descriptors, mask, levels)


def small_motion(rng: np.random.Generator, rot: float = 0.02, trans: float = 0.02) -> Pose:
    xi = np.concatenate([rng.normal(0.0, rot, 3), rng.normal(0.0, trans, 3)])
    return Pose.exp(xi)


def perturb(key, value, delta: np.ndarray):
    if key[0] == POSE:
        return value.retract(delta)
    if key[0] == SCALE:
        return float(value * np.exp(delta[0]))
    return np.asarray(value, dtype=float) + delta


def numerical_gradient(factor, values, h: float = 1e-7) -> np.ndarray:
    """Central differences of ``factor.error`` in the solver's tangent coordinates."""
    grads = []
    for key, dim in zip(factor.keys, factor.dimensions(values)):
        for i in range(dim):
            delta = np.zeros(dim)
            delta[i] = h
            plus = dict(values)
            minus = dict(values)
            plus[key] = perturb(key, values[key], delta)
            minus[key] = perturb(key, values[key], -delta)
            grads.append((factor.error(plus) - factor.error(minus)) / (2 * h))
    return np.array(grads)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return tiny_camera()


@pytest.fixture(scope="session")
def sweep_sequence():
    """Zero-noise sweep: 12 frames, about 1% of the scene per frame."""
    return generate_sequence(SceneConfig(seed=7, frames=12, trajectory="sweep", motion=0.12))


@pytest.fixture(scope="session")
def noisy_sequence():
    return generate_sequence(
        SceneConfig(seed=11, frames=8, trajectory="sweep", motion=0.08, depth_rel=0.02, feature_abs=0.01)
    )
