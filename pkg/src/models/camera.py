from dataclasses import dataclass

import numpy as np

from models.errors import BehindCameraError, ConfigurationError, InvalidDepthError

# Projections closer than this to the camera plane are treated as behind it.
MIN_PROJECTION_DEPTH = 1e-9


@dataclass(frozen=True)
class Camera:
    """
    Pinhole intrinsics shared by every frame of a sequence.

    Pixel coordinates are ``(x, y) = (column, row)`` with pixel centres on
    integers.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError(f"Image size must be positive, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def at_level(self, level: int) -> "Camera":
        """Intrinsics of pyramid level ``level`` (0 is full resolution)."""
        factor = 2**level
        return Camera(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=self.width // factor,
            height=self.height // factor,
        )

    def pixel_grid(self) -> np.ndarray:
        """All pixel coordinates, row-major, as an (H*W, 2) array."""
        rows, cols = np.mgrid[0:self.height, 0:self.width]
        return np.stack([cols.ravel(), rows.ravel()], axis=1).astype(float)

    def rays(self, pixels: np.ndarray) -> np.ndarray:
        """Unit-depth rays ``((x - cx)/fx, (y - cy)/fy, 1)`` for (N, 2) pixels."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        return np.stack(
            [
                (pixels[:, 0] - self.cx) / self.fx,
                (pixels[:, 1] - self.cy) / self.fy,
                np.ones(len(pixels)),
            ],
            axis=1,
        )

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Vectorised projection that never raises.

        Returns:
            (N, 2) pixel coordinates and an (N,) mask of points in front of
            the camera; coordinates of masked-out points are undefined.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        z = points[:, 2]
        in_front = z > MIN_PROJECTION_DEPTH
        safe_z = np.where(in_front, z, 1.0)
        uv = np.stack(
            [self.fx * points[:, 0] / safe_z + self.cx, self.fy * points[:, 1] / safe_z + self.cy],
            axis=1,
        )
        return uv, in_front

    def projection_jacobian(self, points: np.ndarray) -> np.ndarray:
        """(N, 2, 3) derivative of the projection w.r.t. the 3D point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        x, y, z = points[:, 0], points[:, 1], np.where(points[:, 2] > MIN_PROJECTION_DEPTH, points[:, 2], 1.0)
        jac = np.zeros((len(points), 2, 3))
        jac[:, 0, 0] = self.fx / z
        jac[:, 0, 2] = -self.fx * x / z**2
        jac[:, 1, 1] = self.fy / z
        jac[:, 1, 2] = -self.fy * y / z**2
        return jac

    def unproject_points(self, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
        """Vectorised lift of pixels to 3D; depths are not checked."""
        return self.rays(pixels) * np.asarray(depths, dtype=float).reshape(-1, 1)


def project(cam: Camera, point: np.ndarray) -> np.ndarray:
    """
    Project a camera-frame 3D point to pixel coordinates.

    Raises:
        BehindCameraError: if the point depth is not positive
    """
    point = np.asarray(point, dtype=float)
    if point[2] <= 0:
        raise BehindCameraError(f"Cannot project point with depth {point[2]}")
    return np.array([cam.fx * point[0] / point[2] + cam.cx, cam.fy * point[1] / point[2] + cam.cy])


def unproject(cam: Camera, pixel: np.ndarray, depth: float) -> np.ndarray:
    """
    Lift a pixel at the given depth to a camera-frame 3D point.

    Raises:
        InvalidDepthError: if ``depth`` is not positive
    """
    if depth <= 0:
        raise InvalidDepthError(f"Cannot unproject with depth {depth}")
    pixel = np.asarray(pixel, dtype=float)
    return depth * np.array([(pixel[0] - cam.cx) / cam.fx, (pixel[1] - cam.cy) / cam.fy, 1.0])
