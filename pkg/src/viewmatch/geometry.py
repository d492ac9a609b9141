"""Poses, weak-perspective cameras, and rotation-space distances.

Conventions used throughout the package: the camera looks along -z with y up,
so larger depth values are closer to the camera.  Azimuth spins the object
about the world up-axis (y), elevation tilts it about the camera-horizontal
axis (x), and the in-plane angle rotates about the viewing axis (z).  Image
coordinates are (u, v) with u growing rightward and v growing downward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Construction keeps rotations orthonormal to ~1e-9; inputs from outside are
# only trusted up to 1e-6 before geodesic_error refuses them.
ORTHONORMALITY_TOL = 1e-6


def wrap_azimuth(angle: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    wrapped = math.fmod(float(angle), TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    if wrapped >= TWO_PI:
        wrapped = 0.0
    return wrapped


def wrap_inplane(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = float(angle) - TWO_PI * math.floor((float(angle) + math.pi) / TWO_PI)
    if wrapped <= -math.pi:
        wrapped = math.pi
    return wrapped


@dataclass(frozen=True)
class Pose:
    """Object orientation as (azimuth, elevation, in-plane) angles in radians.

    Canonical ranges are azimuth in [0, 2*pi), elevation in [-pi/2, pi/2] and
    in-plane in (-pi, pi]; use :meth:`wrapped` to normalize raw angles.
    """

    azimuth: float
    elevation: float
    inplane: float = 0.0

    @classmethod
    def wrapped(cls, azimuth: float, elevation: float, inplane: float = 0.0) -> "Pose":
        if not (-math.pi / 2 - 1e-12 <= elevation <= math.pi / 2 + 1e-12):
            raise ValueError(f"elevation {elevation} outside [-pi/2, pi/2]")
        elevation = min(max(float(elevation), -math.pi / 2), math.pi / 2)
        return cls(wrap_azimuth(azimuth), elevation, wrap_inplane(inplane))

    def shifted(self, d_azimuth: float = 0.0, d_elevation: float = 0.0,
                d_inplane: float = 0.0) -> "Pose":
        """Offset pose angles; azimuth/in-plane wrap, elevation clamps at the poles."""
        elevation = min(max(self.elevation + d_elevation, -math.pi / 2), math.pi / 2)
        return Pose(wrap_azimuth(self.azimuth + d_azimuth), elevation,
                    wrap_inplane(self.inplane + d_inplane))


@dataclass(frozen=True)
class Camera:
    """Weak-perspective camera over a fixed image raster.

    ``scale`` converts object units to pixels, ``principal`` is the (cx, cy)
    image point the object center projects to, ``image_size`` is (width,
    height) in pixels and ``feature_stride`` is the patch edge length mapping
    the image onto the feature grid.
    """

    scale: float
    principal: tuple[float, float]
    image_size: tuple[int, int]
    feature_stride: int = 1

    def __post_init__(self) -> None:
        if not (math.isfinite(self.scale) and self.scale > 0.0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        width, height = self.image_size
        if width <= 0 or height <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if self.feature_stride < 1:
            raise ValueError(f"feature_stride must be >= 1, got {self.feature_stride}")
        if width % self.feature_stride or height % self.feature_stride:
            raise ValueError(
                f"image_size {self.image_size} not divisible by stride {self.feature_stride}")
        cx, cy = self.principal
        if not (0.0 <= cx <= width and 0.0 <= cy <= height):
            raise ValueError(f"principal point {self.principal} outside the image")

    @property
    def cx(self) -> float:
        return float(self.principal[0])

    @property
    def cy(self) -> float:
        return float(self.principal[1])

    @property
    def width(self) -> int:
        return int(self.image_size[0])

    @property
    def height(self) -> int:
        return int(self.image_size[1])

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Feature-grid shape (rows, cols)."""
        return (self.height // self.feature_stride, self.width // self.feature_stride)


def _rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_pose(pose: Pose) -> np.ndarray:
    """3x3 rotation matrix for a pose.

    Composed as R = Rz(inplane) @ Rx(elevation) @ Ry(azimuth): an azimuth spin
    about the world up-axis, tilted by elevation about the camera-horizontal
    axis, then rotated in-plane about the viewing axis.
    """
    angles = (pose.azimuth, pose.elevation, pose.inplane)
    if not all(math.isfinite(a) for a in angles):
        raise ValueError(f"pose angles must be finite, got {angles}")
    return _rot_z(pose.inplane) @ _rot_x(pose.elevation) @ _rot_y(pose.azimuth)


def project(pose: Pose, camera: Camera, point: np.ndarray) -> tuple[float, float, float]:
    """Project one object-space point to pixel coordinates (u, v) and depth.

    Depth is the camera-axis coordinate of the rotated point; larger values
    are closer to the camera.
    """
    point = np.asarray(point, dtype=float)
    if point.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {point.shape}")
    if not np.all(np.isfinite(point)):
        raise ValueError("point coordinates must be finite")
    rotated = rotation_from_pose(pose) @ point
    u = camera.cx + camera.scale * rotated[0]
    v = camera.cy - camera.scale * rotated[1]
    return float(u), float(v), float(rotated[2])


def _check_rotation(matrix: np.ndarray, name: str) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError(f"{name} contains non-finite entries")
    residual = np.abs(matrix.T @ matrix - np.eye(3)).max()
    if residual > ORTHONORMALITY_TOL:
        raise ValueError(f"{name} is not orthonormal (residual {residual:.3e})")
    det = np.linalg.det(matrix)
    if abs(det - 1.0) > ORTHONORMALITY_TOL:
        raise ValueError(f"{name} has determinant {det:.9f}, expected +1")
    return matrix


def geodesic_error(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic distance between two rotations, in radians within [0, pi]."""
    r1 = _check_rotation(r1, "r1")
    r2 = _check_rotation(r2, "r2")
    cos_angle = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, cos_angle))))
