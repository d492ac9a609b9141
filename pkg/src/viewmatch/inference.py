"""Render-and-compare pose estimation against the vertex feature bank."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import features as featurelib
from . import raster
from .geometry import Camera, Pose
from .matching import similarity
from .mesh import CuboidMesh, VertexFeatureBank


@dataclass(frozen=True)
class GridSpec:
    """Pose grid for the coarse search stage."""

    azimuths: tuple[float, ...]
    elevations: tuple[float, ...]
    inplanes: tuple[float, ...]

    @classmethod
    def default(cls) -> "GridSpec":
        """24 azimuths x 5 elevations x 3 in-plane angles, sized for the
        bundled synthetic scene's pose distribution."""
        azimuths = tuple(k * 2.0 * math.pi / 24.0 for k in range(24))
        elevations = tuple(np.linspace(0.0, 0.5, 5))
        inplanes = (-0.15, 0.0, 0.15)
        return cls(azimuths=azimuths, elevations=elevations, inplanes=inplanes)

    def poses(self) -> list[Pose]:
        return [Pose.wrapped(az, el, ip)
                for az in self.azimuths for el in self.elevations
                for ip in self.inplanes]


@dataclass(frozen=True)
class RefineOptions:
    initial_step: float = math.radians(2.0)
    min_step: float = math.radians(0.1)
    max_steps: int = 100


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose
    score: float
    starts_evaluated: int
    refinement_steps: int


def coarse_search(target_map: np.ndarray, mesh: CuboidMesh, bank: VertexFeatureBank,
                  camera: Camera, grid_spec: GridSpec | None = None,
                  cache: raster.RasterCache | None = None
                  ) -> list[tuple[Pose, float]]:
    """Score every grid pose against the target; best first, ties keep grid order."""
    grid_spec = grid_spec or GridSpec.default()
    grid = target_map.shape[:2]
    if cache is None:
        cache = raster.RasterCache(mesh, camera, grid)
    poses = grid_spec.poses()
    scores = np.array([similarity(target_map, cache.render(bank, pose))
                       for pose in poses])
    order = np.argsort(-scores, kind="stable")
    return [(poses[k], float(scores[k])) for k in order]


def refine(target_map: np.ndarray, start: Pose, mesh: CuboidMesh,
           bank: VertexFeatureBank, camera: Camera,
           options: RefineOptions | None = None,
           trace: list[tuple[Pose, float]] | None = None) -> PoseEstimate:
    """Coordinate-ascent polish of a pose under the matching score.

    Per sweep, each angle is probed one step in both directions and moved to
    the best strictly-improving candidate; the step halves whenever a full
    sweep accepts nothing, until it drops below ``min_step`` or ``max_steps``
    sweeps ran.  The returned score never falls below the start's.
    """
    options = options or RefineOptions()
    grid = target_map.shape[:2]

    def score_of(pose: Pose) -> float:
        return similarity(target_map,
                          raster.render_feature_map(mesh, bank, pose, camera, grid))

    best = start
    best_score = score_of(start)
    if trace is not None:
        trace.append((best, best_score))
    step = options.initial_step
    sweeps = 0
    while step >= options.min_step and sweeps < options.max_steps:
        sweeps += 1
        improved = False
        for axis in ("azimuth", "elevation", "inplane"):
            candidates = []
            for direction in (-step, step):
                shift = {f"d_{axis}": direction}
                candidate = best.shifted(**shift)
                candidates.append((score_of(candidate), candidate))
            top_score, top_pose = max(candidates, key=lambda item: item[0])
            if top_score > best_score:
                best, best_score = top_pose, top_score
                improved = True
                if trace is not None:
                    trace.append((best, best_score))
        if not improved:
            step /= 2.0
    return PoseEstimate(pose=best, score=best_score, starts_evaluated=1,
                        refinement_steps=sweeps)


def estimate_pose_from_map(target_map: np.ndarray, mesh: CuboidMesh,
                           bank: VertexFeatureBank, camera: Camera,
                           grid_spec: GridSpec | None = None,
                           options: RefineOptions | None = None,
                           top_starts: int = 3,
                           cache: raster.RasterCache | None = None
                           ) -> PoseEstimate:
    """Pose search against an already-extracted (or rendered) feature map:
    coarse search, refine the best few starts, return the top-scoring result."""
    if top_starts < 1:
        raise ValueError(f"top_starts must be >= 1, got {top_starts}")
    ranked = coarse_search(target_map, mesh, bank, camera, grid_spec, cache)
    starts = ranked[:top_starts]
    estimates = [refine(target_map, pose, mesh, bank, camera, options)
                 for pose, _ in starts]
    best = max(range(len(estimates)), key=lambda k: estimates[k].score)
    total_sweeps = sum(e.refinement_steps for e in estimates)
    return PoseEstimate(pose=estimates[best].pose, score=estimates[best].score,
                        starts_evaluated=len(starts),
                        refinement_steps=total_sweeps)


def estimate_pose(image: np.ndarray, weights: featurelib.ExtractorWeights,
                  mesh: CuboidMesh, bank: VertexFeatureBank, camera: Camera,
                  grid_spec: GridSpec | None = None,
                  options: RefineOptions | None = None,
                  top_starts: int = 3,
                  cache: raster.RasterCache | None = None) -> PoseEstimate:
    """Full pose estimate of one image: extract features, then search."""
    target_map = featurelib.extract(image, weights, camera)
    return estimate_pose_from_map(target_map, mesh, bank, camera, grid_spec,
                                  options, top_starts, cache)
