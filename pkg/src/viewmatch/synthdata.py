"""Seeded synthetic datasets: textured cuboids over procedural backgrounds.

Every dataset renders one category-like textured cuboid (a fixed per-face
color pattern from ``texture_seed``) under per-instance nuisances: palette
jitter, a global illumination scale, a fresh background, and optional
occluder rectangles on the test split.  Each sample draws from its own RNG
streams derived from (dataset seed, split, index), so generation is
bit-reproducible and order-independent.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import dataio, raster
from .geometry import Camera, Pose
from .mesh import CuboidMesh, VertexFeatureBank, make_cuboid

TEXTURE_SUBDIVISIONS = 8

_BACKGROUNDS = ("noise", "gradient", "tiles")
_SPLIT_ORDER = ("labelled", "unlabelled", "test")
_SPLIT_PREFIX = {"labelled": "lab", "unlabelled": "unl", "test": "tst"}


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the synthetic world; angles are radians."""

    object_dims: tuple[float, float, float] = (1.0, 0.65, 0.45)
    texture_seed: int = 7
    palette_jitter: float = 0.1
    illumination: tuple[float, float] = (0.8, 1.2)
    background: str = "noise"
    occlusion_fraction: float = 0.0
    elevation_range: tuple[float, float] = (0.05, 0.45)
    inplane_range: tuple[float, float] = (-0.15, 0.15)

    def __post_init__(self) -> None:
        if self.background not in _BACKGROUNDS:
            raise ValueError(f"background must be one of {_BACKGROUNDS}, "
                             f"got {self.background!r}")
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise ValueError(
                f"occlusion_fraction must lie in [0, 1), got {self.occlusion_fraction}")
        if self.palette_jitter < 0.0:
            raise ValueError(f"palette_jitter must be >= 0, got {self.palette_jitter}")
        lo, hi = self.illumination
        if not 0.0 < lo <= hi:
            raise ValueError(f"illumination range must be positive, got {self.illumination}")

    @classmethod
    def standard(cls) -> "SceneSpec":
        return cls()


def texture_mesh(spec: SceneSpec) -> CuboidMesh:
    return make_cuboid(spec.object_dims, TEXTURE_SUBDIVISIONS)


def texture_colors(spec: SceneSpec, mesh: CuboidMesh) -> np.ndarray:
    """Fixed per-vertex RGB pattern: a per-face palette modulated by a checker
    and a seeded grain, shared by every instance of the dataset."""
    rng = np.random.default_rng(spec.texture_seed)
    palette = rng.uniform(0.25, 0.95, size=(6, 3))
    n = mesh.subdivisions
    grain = rng.uniform(0.82, 1.18, size=(6, n + 1, n + 1))

    half = np.asarray(mesh.dims) / 2.0
    normalized = mesh.vertices / half
    axis = np.argmax(np.abs(normalized), axis=1)
    side = (normalized[np.arange(len(normalized)), axis] > 0).astype(int)
    face = axis * 2 + side

    lattice = np.rint((mesh.vertices / np.asarray(mesh.dims) + 0.5) * n).astype(int)
    colors = np.empty((mesh.vertex_count, 3))
    for r in range(mesh.vertex_count):
        other = [a for a in range(3) if a != axis[r]]
        i, j = lattice[r, other[0]], lattice[r, other[1]]
        checker = 0.72 if (i + j) % 2 else 1.0
        colors[r] = palette[face[r]] * checker * grain[face[r], i, j]
    return np.clip(colors, 0.0, 1.0)


def _background(kind: str, shape: tuple[int, int], rng: np.random.Generator
                ) -> np.ndarray:
    height, width = shape
    if kind == "noise":
        return rng.uniform(0.0, 1.0, size=(height, width, 3))
    if kind == "gradient":
        c0, c1 = rng.uniform(0.0, 1.0, size=(2, 3))
        angle = rng.uniform(0.0, 2.0 * math.pi)
        ys, xs = np.mgrid[0:height, 0:width]
        ramp = xs * math.cos(angle) + ys * math.sin(angle)
        spread = float(ramp.max() - ramp.min())
        ramp = (ramp - ramp.min()) / max(spread, 1e-9)
        return c0 + ramp[:, :, None] * (c1 - c0)
    if kind == "tiles":
        tile = 16
        c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
        th, tw = -(-height // tile), -(-width // tile)
        flicker = rng.uniform(0.85, 1.15, size=(th, tw, 1))
        ti, tj = np.mgrid[0:th, 0:tw]
        board = np.where(((ti + tj) % 2 == 0)[:, :, None], c0, c1) * flicker
        full = np.repeat(np.repeat(board, tile, axis=0), tile, axis=1)
        return np.clip(full[:height, :width], 0.0, 1.0)
    raise ValueError(f"unknown background kind {kind!r}")


def render_sample(spec: SceneSpec, camera: Camera, pose: Pose,
                  rng: np.random.Generator,
                  mesh: CuboidMesh | None = None,
                  colors: np.ndarray | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """One instance image plus its object coverage mask.

    ``rng`` drives the per-instance nuisances (palette jitter, illumination,
    background) in a fixed draw order.
    """
    mesh = mesh if mesh is not None else texture_mesh(spec)
    colors = colors if colors is not None else texture_colors(spec, mesh)
    jitter = rng.uniform(-spec.palette_jitter, spec.palette_jitter, size=3)
    illumination = rng.uniform(*spec.illumination)
    instance = np.clip((colors + jitter) * illumination, 0.0, 1.0)

    pixel_camera = replace(camera, feature_stride=1)
    shape = pixel_camera.grid_shape
    buffers = raster.rasterize(mesh, pose, pixel_camera, shape)
    bank = VertexFeatureBank(features=instance,
                             initialized=np.ones(mesh.vertex_count, dtype=bool))
    rgb = raster.render_from_buffers(mesh, bank, buffers)
    mask = buffers.face_id >= 0

    image = _background(spec.background, shape, rng)
    image[mask] = np.clip(rgb[mask], 0.0, 1.0)
    return image, mask


def occlude(image: np.ndarray, fraction: float, rng: np.random.Generator | int,
            bbox: tuple[int, int, int, int] | None = None
            ) -> tuple[np.ndarray, np.ndarray]:
    """Paste seeded textured rectangles until ``fraction`` of ``bbox`` is covered.

    ``bbox`` is (row0, col0, row1, col1) with exclusive ends, defaulting to
    the whole image.  Individual rectangles stay small relative to the box, so
    total coverage lands within a few percent of the request.  Returns the
    occluded copy and the occluder mask.
    """
    image = np.asarray(image, dtype=float)
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    height, width = image.shape[:2]
    r0, c0, r1, c1 = bbox if bbox is not None else (0, 0, height, width)
    if not (0 <= r0 < r1 <= height and 0 <= c0 < c1 <= width):
        raise ValueError(f"bbox {bbox} does not fit a {height}x{width} image")

    out = image.copy()
    mask = np.zeros((height, width), dtype=bool)
    if fraction == 0.0:
        return out, mask
    box_h, box_w = r1 - r0, c1 - c0
    target = fraction * box_h * box_w
    for _ in range(1000):
        if mask[r0:r1, c0:c1].sum() >= target:
            break
        rect_h = min(box_h, max(2, int(round(rng.uniform(0.10, 0.22) * box_h))))
        rect_w = min(box_w, max(2, int(round(rng.uniform(0.10, 0.22) * box_w))))
        top = int(rng.integers(r0, r1 - rect_h + 1))
        left = int(rng.integers(c0, c1 - rect_w + 1))
        base = rng.uniform(0.1, 0.9, size=3)
        patch = np.clip(base + rng.uniform(-0.08, 0.08, size=(rect_h, rect_w, 3)),
                        0.0, 1.0)
        out[top:top + rect_h, left:left + rect_w] = patch
        mask[top:top + rect_h, left:left + rect_w] = True
    return out, mask


def _sample_rng(seed: int, split: str, index: int, stream: int
                ) -> np.random.Generator:
    return np.random.default_rng((seed, _SPLIT_ORDER.index(split), index, stream))


def pose_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return _sample_rng(seed, split, index, 0)


def appearance_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return _sample_rng(seed, split, index, 1)


def occlusion_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return _sample_rng(seed, split, index, 2)


def labelled_pose(spec: SceneSpec, index: int, count: int) -> Pose:
    """Labelled poses spread azimuths evenly at the median elevation/in-plane."""
    return Pose.wrapped(index * 2.0 * math.pi / count,
                        0.5 * sum(spec.elevation_range),
                        0.5 * sum(spec.inplane_range))


def random_pose(spec: SceneSpec, rng: np.random.Generator) -> Pose:
    return Pose.wrapped(rng.uniform(0.0, 2.0 * math.pi),
                        rng.uniform(*spec.elevation_range),
                        rng.uniform(*spec.inplane_range))


def _mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0:
        return None
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def generate_dataset(spec: SceneSpec, counts: tuple[int, int, int], seed: int,
                     out_dir: str | os.PathLike, camera: Camera
                     ) -> list[dataio.ManifestEntry]:
    """Write images plus ``manifest.txt`` under ``out_dir`` and return entries.

    ``counts`` is (labelled, unlabelled, test).  Ground-truth poses are
    recorded for every split; occluders apply to the test split only, and the
    recorded occlusion fraction is the one requested by the scene.
    """
    n_labelled, n_unlabelled, n_test = (int(c) for c in counts)
    if min(n_labelled, n_unlabelled, n_test) < 1:
        raise ValueError(f"all split counts must be >= 1, got {counts}")
    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    mesh = texture_mesh(spec)
    colors = texture_colors(spec, mesh)
    entries: list[dataio.ManifestEntry] = []
    for split, count in zip(_SPLIT_ORDER, (n_labelled, n_unlabelled, n_test)):
        for index in range(count):
            if split == "labelled":
                pose = labelled_pose(spec, index, count)
            else:
                pose = random_pose(spec, pose_rng(seed, split, index))
            image, mask = render_sample(spec, camera, pose,
                                        appearance_rng(seed, split, index),
                                        mesh=mesh, colors=colors)
            occlusion = 0.0
            if split == "test" and spec.occlusion_fraction > 0.0:
                bbox = _mask_bbox(mask)
                if bbox is not None:
                    image, _ = occlude(image, spec.occlusion_fraction,
                                       occlusion_rng(seed, split, index), bbox=bbox)
                    occlusion = spec.occlusion_fraction
            image_id = f"{_SPLIT_PREFIX[split]}_{index:04d}"
            rel_path = f"images/{image_id}.nvst"
            dataio.write_tensor(os.path.join(out_dir, rel_path), image)
            entries.append(dataio.ManifestEntry(
                image_id=image_id, path=rel_path, split=split,
                occlusion_fraction=occlusion, pose=pose))
    dataio.write_manifest(os.path.join(out_dir, "manifest.txt"), entries)
    return entries
