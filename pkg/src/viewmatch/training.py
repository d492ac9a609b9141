"""Contrastive extractor training and the pseudo-labelling outer loop.

Training alternates, per outer iteration: synthesize novel views around every
currently-labelled pose, mint pseudo-labels by matching those views against
the unlabelled pool, run a few contrastive epochs on the enlarged set, then
refresh the per-vertex feature bank by moving average.  The reach of the
synthesized azimuth offsets grows by a fixed increment per iteration until it
wraps the full circle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import features as featurelib
from . import matching
from . import raster
from .config import PipelineConfig
from .dataio import Checkpoint
from .geometry import Camera, Pose, geodesic_error, rotation_from_pose
from .matching import NORM_EPS, PseudoLabelSet
from .mesh import CuboidMesh, VertexFeatureBank, init_vertex_features, \
    seeded_vertex_features, update_vertex_features


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of the outer loop; angles are radians."""

    alpha: float = 0.1
    tau: float = 0.02
    delta_step: float = math.radians(10.0)
    schedule_increment: float = math.radians(10.0)
    outer_iterations: int = 12
    epochs_per_iteration: int = 8
    pairs_per_step: int = 32
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    negative_weight: float = 0.1
    per_view_cap: int = 3
    step_cap: int = 50
    channels: int = 16
    offset_elevation: bool = False
    offset_inplane: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not -1.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (-1, 1], got {self.tau}")
        if self.delta_step <= 0.0 or self.schedule_increment <= 0.0:
            raise ValueError("offset step and schedule increment must be positive")
        if self.outer_iterations < 0:
            raise ValueError(f"outer_iterations must be >= 0, got {self.outer_iterations}")
        if self.learning_rate <= 0.0 or self.epsilon <= 0.0:
            raise ValueError("learning_rate and epsilon must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("moment decays must lie in [0, 1)")
        if self.negative_weight < 0.0:
            raise ValueError(f"negative_weight must be >= 0, got {self.negative_weight}")
        if min(self.pairs_per_step, self.per_view_cap, self.step_cap,
               self.channels, self.epochs_per_iteration) < 1:
            raise ValueError("counts and caps must be >= 1")


def _sampled_vertex_features(feature_map: np.ndarray, mesh: CuboidMesh, pose: Pose,
                             camera: Camera):
    """Per-vertex samples plus everything needed to push gradients back."""
    height, width = feature_map.shape[:2]
    visible = raster.visible_vertices(mesh, pose, camera, (height, width))
    rows, cols, _ = raster.project_to_grid(mesh, pose, camera)
    sampled = np.zeros((mesh.vertex_count, feature_map.shape[2]))
    idx = np.nonzero(visible)[0]
    if idx.size:
        sampled[idx] = raster.sample_bilinear(feature_map, rows[idx], cols[idx])
    return sampled, visible, rows, cols


def _scatter(shape, rows, cols, vertex_grads, targets):
    """Spread per-vertex gradients for the ``targets`` vertices onto a map."""
    if targets.size == 0:
        return np.zeros(shape)
    return raster.scatter_bilinear(shape, rows[targets], cols[targets],
                                   vertex_grads[targets])


def loss_positive(map_i: np.ndarray, map_j: np.ndarray,
                  poses: tuple[Pose, Pose], mesh: CuboidMesh, camera: Camera
                  ) -> tuple[float, np.ndarray, np.ndarray]:
    """Alignment loss: sum of cosine distances between the two samples of each
    vertex visible in both views, with gradients w.r.t. both feature maps."""
    map_i = np.asarray(map_i, dtype=float)
    map_j = np.asarray(map_j, dtype=float)
    if map_i.shape != map_j.shape:
        raise ValueError(f"feature map shapes differ: {map_i.shape} vs {map_j.shape}")
    pose_i, pose_j = poses
    si, vis_i, rows_i, cols_i = _sampled_vertex_features(map_i, mesh, pose_i, camera)
    sj, vis_j, rows_j, cols_j = _sampled_vertex_features(map_j, mesh, pose_j, camera)
    both = np.nonzero(vis_i & vis_j)[0]

    grad_i = np.zeros_like(si)
    grad_j = np.zeros_like(sj)
    value = 0.0
    if both.size:
        u = si[both]
        v = sj[both]
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        ok = (nu >= NORM_EPS) & (nv >= NORM_EPS)
        cos = np.zeros(both.size)
        cos[ok] = np.einsum("rc,rc->r", u[ok], v[ok]) / (nu[ok] * nv[ok])
        value = float(np.sum(1.0 - cos))
        # d(1 - cos)/du = -(v_hat - cos * u_hat) / |u|; zero on the pinned
        # near-zero branch where the cosine is constant.
        gu = np.zeros_like(u)
        gv = np.zeros_like(v)
        u_hat = u[ok] / nu[ok, None]
        v_hat = v[ok] / nv[ok, None]
        gu[ok] = -(v_hat - cos[ok, None] * u_hat) / nu[ok, None]
        gv[ok] = -(u_hat - cos[ok, None] * v_hat) / nv[ok, None]
        grad_i[both] = gu
        grad_j[both] = gv
    return (value,
            _scatter(map_i.shape, rows_i, cols_i, grad_i, both),
            _scatter(map_j.shape, rows_j, cols_j, grad_j, both))


def loss_negative(map_i: np.ndarray, map_j: np.ndarray,
                  poses: tuple[Pose, Pose], mesh: CuboidMesh, camera: Camera
                  ) -> tuple[float, np.ndarray, np.ndarray]:
    """Separation loss: summed cosine similarity between samples of every
    cross-view vertex pair (r, r') with r != r', both visible."""
    map_i = np.asarray(map_i, dtype=float)
    map_j = np.asarray(map_j, dtype=float)
    if map_i.shape != map_j.shape:
        raise ValueError(f"feature map shapes differ: {map_i.shape} vs {map_j.shape}")
    pose_i, pose_j = poses
    si, vis_i, rows_i, cols_i = _sampled_vertex_features(map_i, mesh, pose_i, camera)
    sj, vis_j, rows_j, cols_j = _sampled_vertex_features(map_j, mesh, pose_j, camera)

    nu = np.linalg.norm(si, axis=1)
    nv = np.linalg.norm(sj, axis=1)
    ok_i = vis_i & (nu >= NORM_EPS)
    ok_j = vis_j & (nv >= NORM_EPS)
    unit_i = np.zeros_like(si)
    unit_j = np.zeros_like(sj)
    unit_i[ok_i] = si[ok_i] / nu[ok_i, None]
    unit_j[ok_j] = sj[ok_j] / nv[ok_j, None]

    pair = np.outer(ok_i, ok_j).astype(float)
    np.fill_diagonal(pair, 0.0)
    gram = unit_i @ unit_j.T
    value = float(np.sum(gram * pair))

    # dL/d(unit_i[r]) sums unit_j over the admissible partners, then the
    # normalization is unwound per row.
    partner_i = pair @ unit_j
    partner_j = pair.T @ unit_i
    grad_si = np.zeros_like(si)
    grad_sj = np.zeros_like(sj)
    dots_i = np.einsum("rc,rc->r", unit_i[ok_i], partner_i[ok_i])
    grad_si[ok_i] = (partner_i[ok_i] - dots_i[:, None] * unit_i[ok_i]) / nu[ok_i, None]
    dots_j = np.einsum("rc,rc->r", unit_j[ok_j], partner_j[ok_j])
    grad_sj[ok_j] = (partner_j[ok_j] - dots_j[:, None] * unit_j[ok_j]) / nv[ok_j, None]

    idx_i = np.nonzero(ok_i)[0]
    idx_j = np.nonzero(ok_j)[0]
    return (value,
            _scatter(map_i.shape, rows_i, cols_i, grad_si, idx_i),
            _scatter(map_j.shape, rows_j, cols_j, grad_sj, idx_j))


def combined_loss(map_i, map_j, poses, mesh, camera, negative_weight: float
                  ) -> tuple[float, np.ndarray, np.ndarray]:
    lp, gpi, gpj = loss_positive(map_i, map_j, poses, mesh, camera)
    ln, gni, gnj = loss_negative(map_i, map_j, poses, mesh, camera)
    return (lp + negative_weight * ln,
            gpi + negative_weight * gni,
            gpj + negative_weight * gnj)


@dataclass
class OptimizerState:
    """First/second moment accumulators of the adaptive-moment update."""

    m_w: np.ndarray
    v_w: np.ndarray
    m_b: np.ndarray
    v_b: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, weights: featurelib.ExtractorWeights) -> "OptimizerState":
        return cls(m_w=np.zeros_like(weights.w), v_w=np.zeros_like(weights.w),
                   m_b=np.zeros_like(weights.b), v_b=np.zeros_like(weights.b))


def adam_step(weights: featurelib.ExtractorWeights, state: OptimizerState,
              grad_w: np.ndarray, grad_b: np.ndarray, config: TrainConfig
              ) -> featurelib.ExtractorWeights:
    """One bias-corrected adaptive-moment update, mutating ``state`` in place."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    state.m_w = b1 * state.m_w + (1.0 - b1) * grad_w
    state.v_w = b2 * state.v_w + (1.0 - b2) * grad_w ** 2
    state.m_b = b1 * state.m_b + (1.0 - b1) * grad_b
    state.v_b = b2 * state.v_b + (1.0 - b2) * grad_b ** 2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = config.learning_rate
    new_w = weights.w - lr * (state.m_w / c1) / (np.sqrt(state.v_w / c2) + config.epsilon)
    new_b = weights.b - lr * (state.m_b / c1) / (np.sqrt(state.v_b / c2) + config.epsilon)
    return featurelib.ExtractorWeights(w=new_w, b=new_b)


TrainItem = tuple[str, np.ndarray, Pose]  # (image id, raw descriptor map, pose)


def train_epoch(weights: featurelib.ExtractorWeights, optimizer: OptimizerState,
                items: Sequence[TrainItem], mesh: CuboidMesh, camera: Camera,
                config: TrainConfig, rng: np.random.Generator | None = None
                ) -> tuple[featurelib.ExtractorWeights, float]:
    """Sample a batch of image pairs, average their loss gradients, take one step.

    ``items`` carry precomputed raw descriptor maps so repeated epochs do not
    re-run the descriptor stage.  Returns the updated weights and the mean
    combined loss over the sampled pairs.
    """
    if len(items) < 2:
        raise ValueError("training needs at least two images")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    count = len(items)
    pairs = [(i, j) for i in range(count) for j in range(i + 1, count)]
    take = min(config.pairs_per_step, len(pairs))
    chosen = rng.choice(len(pairs), size=take, replace=False)

    grad_w = np.zeros_like(weights.w)
    grad_b = np.zeros_like(weights.b)
    total = 0.0
    for pair_index in chosen:
        i, j = pairs[pair_index]
        _, raw_i, pose_i = items[i]
        _, raw_j, pose_j = items[j]
        map_i = featurelib.extract_from_raw(raw_i, weights)
        map_j = featurelib.extract_from_raw(raw_j, weights)
        value, grad_map_i, grad_map_j = combined_loss(
            map_i, map_j, (pose_i, pose_j), mesh, camera, config.negative_weight)
        total += value
        gw, gb = featurelib.backprop_weights(raw_i, grad_map_i)
        grad_w += gw
        grad_b += gb
        gw, gb = featurelib.backprop_weights(raw_j, grad_map_j)
        grad_w += gw
        grad_b += gb
    grad_w /= take
    grad_b /= take
    new_weights = adam_step(weights, optimizer, grad_w, grad_b, config)
    return new_weights, total / take


@dataclass
class HistoryRow:
    """One outer iteration's summary; precision is NaN without ground truth."""

    iteration: int
    delta_range_deg: float
    pseudo_count: int
    mean_loss: float
    pseudo_precision: float


@dataclass
class EmState:
    """Resumable outer-loop state, as stored in a checkpoint."""

    weights: featurelib.ExtractorWeights
    bank: VertexFeatureBank
    pseudo_labels: PseudoLabelSet
    next_iteration: int = 1


@dataclass
class EmResult:
    weights: featurelib.ExtractorWeights
    bank: VertexFeatureBank
    pseudo_labels: PseudoLabelSet
    history: list[HistoryRow]


def _f32_clean_weights(weights: featurelib.ExtractorWeights) -> featurelib.ExtractorWeights:
    return featurelib.ExtractorWeights(
        w=weights.w.astype(np.float32).astype(float),
        b=weights.b.astype(np.float32).astype(float))


def _f32_clean_bank(bank: VertexFeatureBank) -> VertexFeatureBank:
    return VertexFeatureBank(
        features=bank.features.astype(np.float32).astype(float),
        initialized=bank.initialized.copy())


def initial_checkpoint(pipeline: PipelineConfig) -> Checkpoint:
    """The pipeline's state before it has seen any image.

    Weights come from the seeded affine init and the bank holds seeded unit
    features, so views synthesized from it carry no image content.  Serves as
    the untrained baseline when judging what a trained checkpoint learned.
    """
    weights = _f32_clean_weights(
        featurelib.init_weights(pipeline.channels, seed=pipeline.seed))
    bank = _f32_clean_bank(seeded_vertex_features(
        pipeline.make_mesh(), pipeline.channels, seed=pipeline.seed))
    return Checkpoint(config=pipeline, weights=weights, bank=bank,
                      pseudo_labels=PseudoLabelSet.empty())


def offsets_for_iteration(iteration: int, config: TrainConfig) -> list[float]:
    """Signed azimuth offsets of one iteration: +-delta_step .. +-range."""
    reach = min(math.pi, iteration * config.schedule_increment)
    count = int(math.floor(reach / config.delta_step + 1e-9))
    magnitudes = [j * config.delta_step for j in range(1, count + 1)]
    return [sign * m for m in magnitudes for sign in (-1.0, 1.0)]


def _novel_poses(anchor_poses: Sequence[Pose], offsets: Sequence[float],
                 config: TrainConfig) -> list[Pose]:
    """Offset poses around every anchor, deduplicated in first-seen order.

    Pseudo-labelled anchors sit on offset grids of earlier anchors, so most
    shifted poses here revisit existing grid points up to float round-off;
    keys are quantized to a nanoradian so those collapse instead of being
    rendered and matched again.
    """
    seen: dict[tuple[float, float, float], Pose] = {}
    for anchor in anchor_poses:
        for off in offsets:
            shifted = [anchor.shifted(d_azimuth=off)]
            if config.offset_elevation:
                shifted.append(anchor.shifted(d_elevation=off))
            if config.offset_inplane:
                shifted.append(anchor.shifted(d_inplane=off))
            for pose in shifted:
                key = (round(pose.azimuth, 9), round(pose.elevation, 9),
                       round(pose.inplane, 9))
                seen.setdefault(key, pose)
    return list(seen.values())


def run_em(labelled: Sequence[tuple[str, np.ndarray, Pose]],
           pool: Sequence[tuple[str, np.ndarray]],
           mesh: CuboidMesh, camera: Camera, config: TrainConfig,
           ground_truth: Mapping[str, Pose] | None = None,
           state: EmState | None = None) -> EmResult:
    """Run the alternating pseudo-labelling / training loop.

    ``labelled`` holds (image id, image, pose) with trusted poses; ``pool``
    holds (image id, image) without poses.  ``ground_truth`` is only consulted
    to report pseudo-label precision in the history.  Passing ``state``
    resumes from a previous run's end-of-iteration snapshot; since weights and
    bank are rounded to float32 at every iteration boundary, a resumed run
    reproduces the uninterrupted one exactly.
    """
    if not labelled:
        raise ValueError("need at least one labelled image")
    labelled_ids = [image_id for image_id, _, _ in labelled]
    if len(set(labelled_ids)) != len(labelled_ids):
        raise ValueError("labelled image ids must be unique")

    stride = camera.feature_stride
    raw_maps: dict[str, np.ndarray] = {}
    for image_id, image, _ in labelled:
        raw_maps[image_id] = featurelib.compute_raw_descriptors(image, stride)
    labelled_set = set(labelled_ids)
    pool_ids = []
    for image_id, image in pool:
        if image_id in labelled_set:
            continue
        if image_id in raw_maps:
            raise ValueError(f"duplicate pool image id {image_id!r}")
        raw_maps[image_id] = featurelib.compute_raw_descriptors(image, stride)
        pool_ids.append(image_id)

    if state is None:
        weights = _f32_clean_weights(
            featurelib.init_weights(config.channels, seed=config.seed))
        labelled_maps = [(featurelib.extract_from_raw(raw_maps[image_id], weights), pose)
                         for image_id, _, pose in labelled]
        bank = _f32_clean_bank(
            init_vertex_features(labelled_maps, mesh, camera))
        pseudo = PseudoLabelSet.empty()
        first_iteration = 1
    else:
        weights = _f32_clean_weights(state.weights)
        bank = _f32_clean_bank(state.bank)
        pseudo = PseudoLabelSet(entries=dict(state.pseudo_labels.entries))
        first_iteration = state.next_iteration

    grid = camera.grid_shape
    cache = raster.RasterCache(mesh, camera, grid)
    history: list[HistoryRow] = []

    for iteration in range(first_iteration, config.outer_iterations + 1):
        offsets = offsets_for_iteration(iteration, config)
        anchor_poses = [pose for _, _, pose in labelled]
        anchor_poses += [pose for pose, _ in pseudo.entries.values()]
        novel = _novel_poses(anchor_poses, offsets, config)
        views = [(cache.render(bank, pose), pose) for pose in novel]

        pool_maps = [(image_id, featurelib.extract_from_raw(raw_maps[image_id], weights))
                     for image_id in pool_ids]
        pseudo = matching.pseudo_label_step(
            views, pool_maps, config.tau, config.per_view_cap,
            existing=pseudo, step_cap=config.step_cap, exclude=labelled_ids)

        items: list[TrainItem] = [(image_id, raw_maps[image_id], pose)
                                  for image_id, _, pose in labelled]
        items += [(image_id, raw_maps[image_id], pose)
                  for image_id, (pose, _) in pseudo.entries.items()]

        losses = []
        if len(items) >= 2:
            optimizer = OptimizerState.zeros(weights)
            for epoch in range(config.epochs_per_iteration):
                rng = np.random.default_rng((config.seed, iteration, epoch))
                weights, mean_loss = train_epoch(
                    weights, optimizer, items, mesh, camera, config, rng=rng)
                losses.append(mean_loss)
        mean_loss = float(np.mean(losses)) if losses else float("nan")

        refreshed = [(featurelib.extract_from_raw(raw, weights), pose)
                     for _, raw, pose in items]
        bank = update_vertex_features(bank, refreshed, mesh, camera,
                                      alpha=config.alpha)

        weights = _f32_clean_weights(weights)
        bank = _f32_clean_bank(bank)

        precision = float("nan")
        if ground_truth is not None and len(pseudo):
            hits = 0
            judged = 0
            for image_id, (pose, _) in pseudo.entries.items():
                truth = ground_truth.get(image_id)
                if truth is None:
                    continue
                judged += 1
                error = geodesic_error(rotation_from_pose(pose),
                                       rotation_from_pose(truth))
                hits += error < math.pi / 6.0
            if judged:
                precision = hits / judged

        history.append(HistoryRow(
            iteration=iteration,
            delta_range_deg=math.degrees(min(math.pi, iteration * config.schedule_increment)),
            pseudo_count=len(pseudo),
            mean_loss=mean_loss,
            pseudo_precision=precision,
        ))

    return EmResult(weights=weights, bank=bank, pseudo_labels=pseudo, history=history)
