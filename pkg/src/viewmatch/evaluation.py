"""Accuracy metrics over pose estimates and the matching-quality diagnostic."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import raster
from .dataio import Checkpoint, ManifestEntry
from .geometry import Pose, geodesic_error, rotation_from_pose
from .inference import PoseEstimate
from .matching import retrieve

logger = logging.getLogger(__name__)

TIGHT_THRESHOLD = math.pi / 18.0
LOOSE_THRESHOLD = math.pi / 6.0

# Occlusion bands: exact zero, then two half-open ranges.
_BANDS = (
    ("0", lambda occ: occ == 0.0),
    ("(0,0.3]", lambda occ: 0.0 < occ <= 0.3),
    ("(0.3,0.6]", lambda occ: 0.3 < occ <= 0.6),
)


@dataclass(frozen=True)
class BandReport:
    count: int
    acc_loose: float
    acc_tight: float
    median_error_deg: float


@dataclass(frozen=True)
class EvalReport:
    """Overall and per-occlusion-band accuracy; empty bands hold NaN metrics."""

    overall: BandReport
    bands: dict[str, BandReport]


def _band_metrics(errors: np.ndarray) -> BandReport:
    if errors.size == 0:
        nan = float("nan")
        return BandReport(count=0, acc_loose=nan, acc_tight=nan, median_error_deg=nan)
    return BandReport(
        count=int(errors.size),
        acc_loose=float(np.mean(errors < LOOSE_THRESHOLD)),
        acc_tight=float(np.mean(errors < TIGHT_THRESHOLD)),
        median_error_deg=float(np.degrees(np.median(errors))),
    )


def evaluate(records: Sequence[tuple[PoseEstimate, Pose, float]]) -> EvalReport:
    """Score (estimate, ground truth, occlusion fraction) records.

    Accuracies are the fractions of rotation errors strictly below pi/6 and
    pi/18; the median error is reported in degrees.
    """
    if not records:
        raise ValueError("cannot evaluate an empty record list")
    errors = np.array([
        geodesic_error(rotation_from_pose(estimate.pose), rotation_from_pose(truth))
        for estimate, truth, _ in records])
    occlusions = np.array([occ for _, _, occ in records])
    bands = {name: _band_metrics(errors[np.array([member(occ) for occ in occlusions])])
             for name, member in _BANDS}
    return EvalReport(overall=_band_metrics(errors), bands=bands)


def write_report_csv(path: str | os.PathLike, report: EvalReport) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["band", "count", "acc_pi6", "acc_pi18", "median_error_deg"])
        for name, band in (("all", report.overall), *report.bands.items()):
            writer.writerow([name, band.count, f"{band.acc_loose:.6f}",
                             f"{band.acc_tight:.6f}", f"{band.median_error_deg:.6f}"])


def write_estimates_csv(path: str | os.PathLike,
                        rows: Sequence[tuple[str, PoseEstimate]]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["image_id", "azimuth_deg", "elevation_deg", "inplane_deg",
                         "score", "starts_evaluated", "refinement_steps"])
        for image_id, estimate in rows:
            pose = estimate.pose
            writer.writerow([
                image_id,
                f"{math.degrees(pose.azimuth):.6f}",
                f"{math.degrees(pose.elevation):.6f}",
                f"{math.degrees(pose.inplane):.6f}",
                f"{estimate.score:.6f}",
                estimate.starts_evaluated,
                estimate.refinement_steps,
            ])


@dataclass(frozen=True)
class MatchingDiagnosticRow:
    offset_deg: float
    mean_rotation_error_deg: float
    top_k: int


def diagnose_matching(checkpoint: Checkpoint,
                      pool: Sequence[tuple[str, np.ndarray, Pose]],
                      anchors: int, offsets_deg: Sequence[float],
                      top_k: int = 3) -> list[MatchingDiagnosticRow]:
    """Retrieval error of synthesized views as a function of azimuth offset.

    For each anchor image, the checkpoint's vertex features are rendered at
    the anchor's ground-truth pose shifted by each azimuth offset and matched
    against the pool's feature maps (the anchor included); the row value is
    the mean rotation error between the shifted pose and the ground truth of
    the ``top_k`` retrieved images, averaged over anchors.
    """
    if not pool:
        raise ValueError("diagnostic pool is empty")
    if anchors < 1:
        raise ValueError(f"anchors must be >= 1, got {anchors}")
    if anchors > len(pool):
        logger.warning("clipping anchors from %d to pool size %d", anchors, len(pool))
        anchors = len(pool)

    from . import features as featurelib  # local to keep module deps light

    camera = checkpoint.config.camera
    mesh = checkpoint.config.make_mesh()
    grid = camera.grid_shape
    cache = raster.RasterCache(mesh, camera, grid)

    maps = [(image_id, featurelib.extract(image, checkpoint.weights, camera))
            for image_id, image, _ in pool]
    truth = {image_id: pose for image_id, _, pose in pool}

    per_offset: dict[float, list[float]] = {float(off): [] for off in offsets_deg}
    for _, _, anchor_pose in pool[:anchors]:
        for off in offsets_deg:
            view_pose = anchor_pose.shifted(d_azimuth=math.radians(off))
            view = cache.render(checkpoint.bank, view_pose)
            matches = retrieve(view, maps, tau=-1.0, max_count=top_k, pose=view_pose)
            if not matches:
                continue
            view_rotation = rotation_from_pose(view_pose)
            errors = [geodesic_error(view_rotation,
                                     rotation_from_pose(truth[m.image_id]))
                      for m in matches]
            per_offset[float(off)].append(float(np.mean(errors)))

    rows = []
    for off in offsets_deg:
        values = per_offset[float(off)]
        mean_err = float(np.degrees(np.mean(values))) if values else float("nan")
        rows.append(MatchingDiagnosticRow(offset_deg=float(off),
                                          mean_rotation_error_deg=mean_err,
                                          top_k=top_k))
    return rows


def write_diagnostic_csv(path: str | os.PathLike,
                         rows: Sequence[MatchingDiagnosticRow]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["offset_deg", "mean_rotation_error_deg", "top_k"])
        for row in rows:
            writer.writerow([f"{row.offset_deg:.6f}",
                             f"{row.mean_rotation_error_deg:.6f}", row.top_k])


def write_history_csv(path: str | os.PathLike, history) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "delta_range_deg", "pseudo_count",
                         "mean_loss", "pseudo_precision"])
        for row in history:
            writer.writerow([row.iteration, f"{row.delta_range_deg:.6f}",
                             row.pseudo_count, f"{row.mean_loss:.6f}",
                             f"{row.pseudo_precision:.6f}"])
