"""Cell-wise cosine matching between synthesized and extracted feature maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import Pose

# Vectors shorter than this are treated as direction-free: their cosine
# similarity is defined as 0 (distance 1).
NORM_EPS = 1e-8


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cosine similarity, with near-zero vectors pinned to distance 1."""
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.shape != v.shape:
        raise ValueError(f"vector shapes differ: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < NORM_EPS or nv < NORM_EPS:
        return 1.0
    return 1.0 - float(np.dot(u, v)) / (nu * nv)


def normalized_cells(feature_map: np.ndarray) -> np.ndarray:
    """Unit feature vectors per cell, flattened to (H*W, C); zero cells stay zero."""
    feature_map = np.asarray(feature_map, dtype=float)
    if feature_map.ndim != 3:
        raise ValueError(f"feature map must be (H, W, C), got shape {feature_map.shape}")
    flat = feature_map.reshape(-1, feature_map.shape[2])
    norms = np.linalg.norm(flat, axis=1)
    out = np.zeros_like(flat)
    ok = norms >= NORM_EPS
    out[ok] = flat[ok] / norms[ok, None]
    return out


def similarity(map_a: np.ndarray, map_b: np.ndarray) -> float:
    """Mean over cells of the cosine similarity between two feature maps.

    Cells where either vector is near zero contribute 0, so a synthesized map
    with an empty background automatically scores only its foreground cells.
    """
    map_a = np.asarray(map_a, dtype=float)
    map_b = np.asarray(map_b, dtype=float)
    if map_a.shape != map_b.shape:
        raise ValueError(f"feature map shapes differ: {map_a.shape} vs {map_b.shape}")
    unit_a = normalized_cells(map_a)
    unit_b = normalized_cells(map_b)
    return float(np.einsum("nc,nc->", unit_a, unit_b) / unit_a.shape[0])


@dataclass(frozen=True)
class MatchResult:
    """One retrieved image with its similarity score and the queried view's pose."""

    image_id: str
    score: float
    assigned_pose: Pose | None = None


def retrieve(synthesized: np.ndarray, pool: Sequence[tuple[str, np.ndarray]],
             tau: float, max_count: int, pose: Pose | None = None
             ) -> list[MatchResult]:
    """Best-matching pool images for a synthesized view.

    Returns at most ``max_count`` results with score strictly above ``tau``,
    sorted by descending score with ties broken by ascending image id.
    """
    if max_count < 1:
        raise ValueError(f"max_count must be >= 1, got {max_count}")
    scored = [(image_id, similarity(synthesized, feature_map))
              for image_id, feature_map in pool]
    scored = [(image_id, score) for image_id, score in scored if score > tau]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return [MatchResult(image_id=image_id, score=score, assigned_pose=pose)
            for image_id, score in scored[:max_count]]


@dataclass
class PseudoLabelSet:
    """Accepted pseudo-labels: image id -> (pose, score of the winning match)."""

    entries: dict[str, tuple[Pose, float]] = field(default_factory=dict)

    @classmethod
    def empty(cls) -> "PseudoLabelSet":
        return cls(entries={})

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.entries

    def score_of(self, image_id: str) -> float:
        return self.entries[image_id][1]

    def pose_of(self, image_id: str) -> Pose:
        return self.entries[image_id][0]


def pseudo_label_step(views: Iterable[tuple[np.ndarray, Pose]],
                      pool: Sequence[tuple[str, np.ndarray]],
                      tau: float, per_view_cap: int,
                      existing: PseudoLabelSet | None = None,
                      step_cap: int | None = None,
                      exclude: Iterable[str] = ()) -> PseudoLabelSet:
    """Mint pseudo-labels by matching synthesized views against a pool.

    Each view contributes its ``per_view_cap`` best matches above ``tau``; an
    image matched by several views (or already labelled in ``existing``)
    keeps the higher-scoring pose.  At most ``step_cap`` images not yet in
    ``existing`` are added, preferring higher scores.  Ids in ``exclude``
    (the supervised set) are never pseudo-labelled.
    """
    existing = existing if existing is not None else PseudoLabelSet.empty()
    excluded = set(exclude)
    eligible = [(image_id, fmap) for image_id, fmap in pool if image_id not in excluded]

    candidates: dict[str, tuple[Pose, float]] = {}
    for view_map, view_pose in views:
        for match in retrieve(view_map, eligible, tau, per_view_cap, pose=view_pose):
            held = candidates.get(match.image_id)
            if held is None or match.score > held[1]:
                candidates[match.image_id] = (view_pose, match.score)

    fresh = sorted((image_id for image_id in candidates if image_id not in existing),
                   key=lambda image_id: (-candidates[image_id][1], image_id))
    if step_cap is not None:
        if step_cap < 0:
            raise ValueError(f"step_cap must be >= 0, got {step_cap}")
        fresh = fresh[:step_cap]
    admitted = set(fresh)

    merged = dict(existing.entries)
    for image_id, (pose, score) in candidates.items():
        if image_id in merged:
            if score > merged[image_id][1]:
                merged[image_id] = (pose, score)
        elif image_id in admitted:
            merged[image_id] = (pose, score)
    return PseudoLabelSet(entries=merged)
