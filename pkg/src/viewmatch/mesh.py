"""Subdivided cuboid meshes and the per-vertex feature store attached to them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import raster
from .geometry import Camera, Pose


@dataclass
class CuboidMesh:
    """Triangle mesh of an axis-aligned cuboid centered at the origin.

    ``vertices`` is (R, 3) float64, ``faces`` is (T, 3) int32 with outward
    (counter-clockwise seen from outside) winding.  Treated as immutable after
    construction.
    """

    vertices: np.ndarray
    faces: np.ndarray
    dims: tuple[float, float, float]
    subdivisions: int

    @property
    def vertex_count(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def face_count(self) -> int:
        return int(self.faces.shape[0])


# Each entry: (fixed axis, lattice value factor 0 or 1, u axis, v axis) with
# axes chosen so that u x v points out of the cuboid.
_FACE_AXES = (
    (0, 0, 2, 1),  # -x
    (0, 1, 1, 2),  # +x
    (1, 0, 0, 2),  # -y
    (1, 1, 2, 0),  # +y
    (2, 0, 1, 0),  # -z
    (2, 1, 0, 1),  # +z
)


def make_cuboid(dims: Sequence[float], subdivisions: int) -> CuboidMesh:
    """Build a cuboid whose six faces are each an n x n quad grid of triangles.

    Shared edge and corner vertices are deduplicated, so the result is a
    closed mesh with 6*(n+1)^2 - 12*(n+1) + 8 vertices and 12*n^2 triangles.
    """
    dims = tuple(float(d) for d in dims)
    if len(dims) != 3 or not all(math.isfinite(d) and d > 0.0 for d in dims):
        raise ValueError(f"dims must be 3 positive finite lengths, got {dims}")
    n = int(subdivisions)
    if n < 1:
        raise ValueError(f"subdivisions must be >= 1, got {subdivisions}")

    index_of: dict[tuple[int, int, int], int] = {}
    lattice: list[tuple[int, int, int]] = []

    def vertex_id(key: tuple[int, int, int]) -> int:
        idx = index_of.get(key)
        if idx is None:
            idx = len(lattice)
            index_of[key] = idx
            lattice.append(key)
        return idx

    faces: list[tuple[int, int, int]] = []
    for fixed_axis, side, u_axis, v_axis in _FACE_AXES:
        grid = np.empty((n + 1, n + 1), dtype=np.int64)
        for a in range(n + 1):
            for b in range(n + 1):
                key = [0, 0, 0]
                key[fixed_axis] = side * n
                key[u_axis] = a
                key[v_axis] = b
                grid[a, b] = vertex_id((key[0], key[1], key[2]))
        for a in range(n):
            for b in range(n):
                p00, p10 = grid[a, b], grid[a + 1, b]
                p01, p11 = grid[a, b + 1], grid[a + 1, b + 1]
                faces.append((p00, p10, p11))
                faces.append((p00, p11, p01))

    lattice_arr = np.array(lattice, dtype=float)
    vertices = (lattice_arr / n - 0.5) * np.asarray(dims)
    return CuboidMesh(vertices=vertices, faces=np.array(faces, dtype=np.int32),
                      dims=dims, subdivisions=n)


@dataclass
class VertexFeatureBank:
    """Per-vertex feature vectors plus a mask of vertices seen at least once.

    ``features`` is (R, C); rows of vertices that were never visible in any
    contributing image stay zero and are flagged False in ``initialized``.
    """

    features: np.ndarray
    initialized: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.initialized = np.asarray(self.initialized, dtype=bool)
        if self.features.ndim != 2:
            raise ValueError(f"features must be (R, C), got shape {self.features.shape}")
        if self.initialized.shape != (self.features.shape[0],):
            raise ValueError("initialized mask must have one entry per vertex")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("bank features must be finite")

    @property
    def channel_count(self) -> int:
        return int(self.features.shape[1])

    @property
    def vertex_count(self) -> int:
        return int(self.features.shape[0])


def seeded_vertex_features(mesh: CuboidMesh, channels: int,
                           seed: int = 0) -> VertexFeatureBank:
    """Unit-norm random feature per vertex: the bank before it has seen data.

    Every row is marked usable so the mesh renders, but the features carry no
    image content; matching against such renders shows how much a fitted bank
    actually contributes.
    """
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(mesh.vertex_count, channels))
    features /= np.linalg.norm(features, axis=1, keepdims=True)
    return VertexFeatureBank(features=features,
                             initialized=np.ones(mesh.vertex_count, dtype=bool))


def init_vertex_features(extracted: Iterable[tuple[np.ndarray, Pose]],
                         mesh: CuboidMesh, camera: Camera) -> VertexFeatureBank:
    """Average sampled features over the images where each vertex is visible."""
    extracted = list(extracted)
    if not extracted:
        raise ValueError("need at least one feature map to initialize the bank")
    channels = int(np.asarray(extracted[0][0]).shape[2])
    sums = np.zeros((mesh.vertex_count, channels))
    counts = np.zeros(mesh.vertex_count)
    for feature_map, pose in extracted:
        feature_map = np.asarray(feature_map, dtype=float)
        if feature_map.ndim != 3 or feature_map.shape[2] != channels:
            raise ValueError(
                f"feature maps must share channel count {channels}, got {feature_map.shape}")
        sampled, visible = raster.sample_vertex_features(feature_map, mesh, pose, camera)
        sums[visible] += sampled[visible]
        counts[visible] += 1.0
    seen = counts > 0
    features = np.zeros_like(sums)
    features[seen] = sums[seen] / counts[seen, None]
    return VertexFeatureBank(features=features, initialized=seen)


def update_vertex_features(bank: VertexFeatureBank,
                           batch: Iterable[tuple[np.ndarray, Pose]],
                           mesh: CuboidMesh, camera: Camera,
                           alpha: float = 0.1) -> VertexFeatureBank:
    """Blend the bank toward the batch mean of each visible vertex's features.

    Vertices visible somewhere in the batch move to
    (1 - alpha) * old + alpha * batch_mean; the rest keep their rows.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    sums = np.zeros_like(bank.features)
    counts = np.zeros(bank.vertex_count)
    for feature_map, pose in batch:
        feature_map = np.asarray(feature_map, dtype=float)
        if feature_map.ndim != 3 or feature_map.shape[2] != bank.channel_count:
            raise ValueError(
                f"feature map shape {feature_map.shape} does not match bank "
                f"with {bank.channel_count} channels")
        sampled, visible = raster.sample_vertex_features(feature_map, mesh, pose, camera)
        sums[visible] += sampled[visible]
        counts[visible] += 1.0
    seen = counts > 0
    features = bank.features.copy()
    features[seen] = (1.0 - alpha) * features[seen] + alpha * (sums[seen] / counts[seen, None])
    return VertexFeatureBank(features=features, initialized=bank.initialized | seen)
