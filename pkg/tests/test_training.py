from __future__ import annotations

import math

import numpy as np
import pytest

from viewmatch import raster
from viewmatch.features import (ExtractorWeights, backprop_weights,
                                extract_from_raw, init_weights)
from viewmatch.geometry import Camera, Pose
from viewmatch.matching import PseudoLabelSet
from viewmatch.mesh import make_cuboid
from viewmatch.config import PipelineConfig
from viewmatch.training import (EmState, OptimizerState, TrainConfig, adam_step,
                                combined_loss, initial_checkpoint, loss_negative,
                                loss_positive, offsets_for_iteration, run_em,
                                train_epoch, _novel_poses)

DEG = math.radians(1.0)


class TestTrainConfig:
    def test_defaults_are_valid(self):
        config = TrainConfig()
        assert config.outer_iterations == 12
        assert config.negative_weight == pytest.approx(0.1)

    @pytest.mark.parametrize("kwargs", [
        {"alpha": 1.5},
        {"tau": -1.0},
        {"delta_step": 0.0},
        {"outer_iterations": -1},
        {"learning_rate": 0.0},
        {"beta1": 1.0},
        {"negative_weight": -0.1},
        {"pairs_per_step": 0},
        {"step_cap": 0},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestOffsetSchedule:
    def test_first_iteration_reaches_one_step(self):
        config = TrainConfig(delta_step=10 * DEG, schedule_increment=10 * DEG)
        offsets = offsets_for_iteration(1, config)
        np.testing.assert_allclose(offsets, [-10 * DEG, 10 * DEG])

    def test_range_grows_linearly(self):
        config = TrainConfig(delta_step=10 * DEG, schedule_increment=10 * DEG)
        offsets = offsets_for_iteration(3, config)
        np.testing.assert_allclose(
            sorted(offsets),
            [d * DEG for d in (-30, -20, -10, 10, 20, 30)])

    def test_range_saturates_at_half_turn(self):
        config = TrainConfig(delta_step=10 * DEG, schedule_increment=10 * DEG)
        offsets = offsets_for_iteration(1000, config)
        assert len(offsets) == 36
        assert max(offsets) == pytest.approx(math.pi, abs=1e-9)

    def test_increment_and_step_can_differ(self):
        config = TrainConfig(delta_step=10 * DEG, schedule_increment=25 * DEG)
        offsets = offsets_for_iteration(1, config)
        np.testing.assert_allclose(sorted(offsets),
                                   [d * DEG for d in (-20, -10, 10, 20)])

    def test_novel_poses_deduplicate_across_anchors(self):
        config = TrainConfig(delta_step=10 * DEG, schedule_increment=10 * DEG)
        anchors = [Pose(0.0, 0.2), Pose(20 * DEG, 0.2)]
        novel = _novel_poses(anchors, offsets_for_iteration(1, config), config)
        azimuths = sorted(math.degrees(p.azimuth) for p in novel)
        assert azimuths == pytest.approx([10.0, 30.0, 350.0])

    def test_novel_poses_can_offset_other_axes(self):
        config = TrainConfig(delta_step=10 * DEG, schedule_increment=10 * DEG,
                             offset_elevation=True)
        novel = _novel_poses([Pose(0.0, 0.2)], [10 * DEG], config)
        keys = {(round(p.azimuth, 6), round(p.elevation, 6)) for p in novel}
        assert keys == {(round(10 * DEG, 6), 0.2), (0.0, round(0.2 + 10 * DEG, 6))}


@pytest.fixture
def pair_setup():
    mesh = make_cuboid((1.0, 0.8, 0.6), 2)
    camera = Camera(scale=40.0, principal=(64.0, 64.0), image_size=(128, 128),
                    feature_stride=8)
    poses = (Pose(0.3, 0.2), Pose(0.55, 0.25))
    rng = np.random.default_rng(42)
    map_i = rng.normal(size=(16, 16, 4))
    map_j = rng.normal(size=(16, 16, 4))
    return mesh, camera, poses, map_i, map_j


class TestLossPositive:
    def test_identical_views_have_zero_loss_and_gradient(self, pair_setup):
        mesh, camera, _, map_i, _ = pair_setup
        pose = Pose(0.3, 0.2)
        value, grad_i, grad_j = loss_positive(map_i, map_i, (pose, pose),
                                              mesh, camera)
        assert value == pytest.approx(0.0, abs=1e-9)
        np.testing.assert_allclose(grad_i, 0.0, atol=1e-9)
        np.testing.assert_allclose(grad_j, 0.0, atol=1e-9)

    def test_value_counts_shared_vertices(self, pair_setup):
        mesh, camera, poses, _, _ = pair_setup
        # Constant orthogonal directions: every shared vertex contributes 1.
        map_i = np.zeros((16, 16, 4))
        map_j = np.zeros((16, 16, 4))
        map_i[..., 0] = 1.0
        map_j[..., 1] = 1.0
        vis_i = raster.visible_vertices(mesh, poses[0], camera, (16, 16))
        vis_j = raster.visible_vertices(mesh, poses[1], camera, (16, 16))
        shared = int(np.sum(vis_i & vis_j))
        assert shared > 0
        value, _, _ = loss_positive(map_i, map_j, poses, mesh, camera)
        assert value == pytest.approx(float(shared), abs=1e-9)

    def test_map_gradient_matches_finite_differences(self, pair_setup):
        mesh, camera, poses, map_i, map_j = pair_setup
        value, grad_i, grad_j = loss_positive(map_i, map_j, poses, mesh, camera)
        assert value > 0.0
        step = 1e-6

        def probe(grad, base, other, order):
            flat = np.abs(grad).ravel()
            targets = np.argsort(-flat)[:3]
            for target in targets:
                idx = np.unravel_index(target, grad.shape)
                bumped = base.copy()
                bumped[idx] += step
                plus = loss_positive(*(order(bumped, other)), poses, mesh, camera)[0]
                bumped[idx] -= 2 * step
                minus = loss_positive(*(order(bumped, other)), poses, mesh, camera)[0]
                fd = (plus - minus) / (2 * step)
                assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)

        probe(grad_i, map_i, map_j, lambda a, b: (a, b))
        probe(grad_j, map_j, map_i, lambda a, b: (b, a))

    def test_zero_map_hits_the_pinned_branch(self, pair_setup):
        mesh, camera, poses, _, map_j = pair_setup
        # All samples from a zero map are direction-free: each shared vertex
        # contributes the pinned distance 1 and no gradient flows anywhere.
        map_i = np.zeros((16, 16, 4))
        vis_i = raster.visible_vertices(mesh, poses[0], camera, (16, 16))
        vis_j = raster.visible_vertices(mesh, poses[1], camera, (16, 16))
        shared = int(np.sum(vis_i & vis_j))
        value, grad_i, grad_j = loss_positive(map_i, map_j, poses, mesh, camera)
        assert value == pytest.approx(float(shared), abs=1e-12)
        np.testing.assert_array_equal(grad_i, 0.0)
        np.testing.assert_array_equal(grad_j, 0.0)


class TestLossNegative:
    def test_orthogonal_constant_maps_score_zero(self, pair_setup):
        mesh, camera, poses, _, _ = pair_setup
        map_i = np.zeros((16, 16, 4))
        map_j = np.zeros((16, 16, 4))
        map_i[..., 0] = 1.0
        map_j[..., 1] = 1.0
        value, _, _ = loss_negative(map_i, map_j, poses, mesh, camera)
        assert value == pytest.approx(0.0, abs=1e-9)

    def test_identical_direction_maps_count_cross_pairs(self, pair_setup):
        mesh, camera, poses, _, _ = pair_setup
        map_i = np.zeros((16, 16, 4))
        map_j = np.zeros((16, 16, 4))
        map_i[..., 2] = 1.0
        map_j[..., 2] = 1.0
        vis_i = raster.visible_vertices(mesh, poses[0], camera, (16, 16))
        vis_j = raster.visible_vertices(mesh, poses[1], camera, (16, 16))
        expected = int(vis_i.sum()) * int(vis_j.sum()) - int(np.sum(vis_i & vis_j))
        value, _, _ = loss_negative(map_i, map_j, poses, mesh, camera)
        assert value == pytest.approx(float(expected), abs=1e-9)

    def test_map_gradient_matches_finite_differences(self, pair_setup):
        mesh, camera, poses, map_i, map_j = pair_setup
        _, grad_i, _ = loss_negative(map_i, map_j, poses, mesh, camera)
        step = 1e-6
        flat = np.abs(grad_i).ravel()
        for target in np.argsort(-flat)[:3]:
            idx = np.unravel_index(target, grad_i.shape)
            bumped = map_i.copy()
            bumped[idx] += step
            plus = loss_negative(bumped, map_j, poses, mesh, camera)[0]
            bumped[idx] -= 2 * step
            minus = loss_negative(bumped, map_j, poses, mesh, camera)[0]
            fd = (plus - minus) / (2 * step)
            assert grad_i[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestCombinedLoss:
    def test_is_weighted_sum_of_parts(self, pair_setup):
        mesh, camera, poses, map_i, map_j = pair_setup
        lam = 0.3
        value, grad_i, grad_j = combined_loss(map_i, map_j, poses, mesh, camera,
                                              negative_weight=lam)
        lp, gpi, gpj = loss_positive(map_i, map_j, poses, mesh, camera)
        ln, gni, gnj = loss_negative(map_i, map_j, poses, mesh, camera)
        assert value == pytest.approx(lp + lam * ln, abs=1e-12)
        np.testing.assert_allclose(grad_i, gpi + lam * gni, atol=1e-12)
        np.testing.assert_allclose(grad_j, gpj + lam * gnj, atol=1e-12)

    def test_weight_gradient_matches_finite_differences(self, pair_setup):
        mesh, camera, poses, _, _ = pair_setup
        rng = np.random.default_rng(3)
        raw_i = rng.normal(size=(16, 16, 14))
        raw_j = rng.normal(size=(16, 16, 14))
        weights = init_weights(channels=4, seed=9)
        lam = 0.1

        def loss_of(w, b):
            mp_i = extract_from_raw(raw_i, ExtractorWeights(w=w, b=b))
            mp_j = extract_from_raw(raw_j, ExtractorWeights(w=w, b=b))
            return combined_loss(mp_i, mp_j, poses, mesh, camera, lam)

        value, grad_map_i, grad_map_j = loss_of(weights.w, weights.b)
        gw_i, gb_i = backprop_weights(raw_i, grad_map_i)
        gw_j, gb_j = backprop_weights(raw_j, grad_map_j)
        grad_w = gw_i + gw_j
        grad_b = gb_i + gb_j

        step = 1e-5
        picks = [np.unravel_index(t, grad_w.shape)
                 for t in np.argsort(-np.abs(grad_w).ravel())[:4]]
        for idx in picks:
            bumped = weights.w.copy()
            bumped[idx] += step
            plus = loss_of(bumped, weights.b)[0]
            bumped[idx] -= 2 * step
            minus = loss_of(bumped, weights.b)[0]
            fd = (plus - minus) / (2 * step)
            assert abs(grad_w[idx] - fd) <= 1e-4 * max(1.0, abs(fd))
        bumped_b = weights.b.copy()
        bumped_b[1] += step
        plus = loss_of(weights.w, bumped_b)[0]
        bumped_b[1] -= 2 * step
        minus = loss_of(weights.w, bumped_b)[0]
        fd = (plus - minus) / (2 * step)
        assert abs(grad_b[1] - fd) <= 1e-4 * max(1.0, abs(fd))


class TestAdamStep:
    def reference_update(self, w0, grads, lr, b1, b2, eps):
        w = w0.copy()
        m = np.zeros_like(w0)
        v = np.zeros_like(w0)
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            w = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        return w

    def test_matches_reference_over_several_steps(self, rng):
        config = TrainConfig(learning_rate=0.01, channels=3)
        weights = init_weights(channels=3, seed=0)
        state = OptimizerState.zeros(weights)
        grads_w = [rng.normal(size=weights.w.shape) for _ in range(5)]
        grads_b = [rng.normal(size=weights.b.shape) for _ in range(5)]
        current = weights
        for gw, gb in zip(grads_w, grads_b):
            current = adam_step(current, state, gw, gb, config)
        expected_w = self.reference_update(weights.w, grads_w, 0.01, config.beta1,
                                           config.beta2, config.epsilon)
        expected_b = self.reference_update(weights.b, grads_b, 0.01, config.beta1,
                                           config.beta2, config.epsilon)
        np.testing.assert_allclose(current.w, expected_w, atol=1e-12)
        np.testing.assert_allclose(current.b, expected_b, atol=1e-12)
        assert state.step == 5

    def test_first_step_is_signed_learning_rate(self):
        config = TrainConfig(learning_rate=0.5, channels=2)
        weights = ExtractorWeights(w=np.zeros((2, 14)), b=np.zeros(2))
        state = OptimizerState.zeros(weights)
        grad_w = np.zeros((2, 14))
        grad_w[0, 0] = 3.0
        grad_w[1, 1] = -0.2
        updated = adam_step(weights, state, grad_w, np.zeros(2), config)
        assert updated.w[0, 0] == pytest.approx(-0.5, rel=1e-6)
        assert updated.w[1, 1] == pytest.approx(0.5, rel=1e-6)

    def test_zero_gradient_leaves_weights_alone(self):
        config = TrainConfig(channels=2)
        weights = init_weights(channels=2, seed=1)
        state = OptimizerState.zeros(weights)
        updated = adam_step(weights, state, np.zeros_like(weights.w),
                            np.zeros_like(weights.b), config)
        np.testing.assert_array_equal(updated.w, weights.w)
        np.testing.assert_array_equal(updated.b, weights.b)


def synthetic_items(rng, count, camera, channels=14):
    items = []
    for k in range(count):
        image = rng.uniform(size=(camera.height, camera.width, 3))
        from viewmatch.features import compute_raw_descriptors
        raw = compute_raw_descriptors(image, camera.feature_stride)
        pose = Pose(2.0 * math.pi * k / count, 0.2)
        items.append((f"img_{k:02d}", raw, pose))
    return items


@pytest.fixture
def small_world():
    mesh = make_cuboid((1.0, 0.8, 0.6), 1)
    camera = Camera(scale=10.0, principal=(16.0, 16.0), image_size=(32, 32),
                    feature_stride=4)
    return mesh, camera


class TestTrainEpoch:
    def test_is_deterministic_given_rng(self, small_world):
        mesh, camera = small_world
        rng = np.random.default_rng(0)
        items = synthetic_items(rng, 4, camera)
        config = TrainConfig(channels=4, pairs_per_step=3)
        weights = init_weights(channels=4, seed=0)
        out_a, loss_a = train_epoch(weights, OptimizerState.zeros(weights), items,
                                    mesh, camera, config,
                                    rng=np.random.default_rng(5))
        out_b, loss_b = train_epoch(weights, OptimizerState.zeros(weights), items,
                                    mesh, camera, config,
                                    rng=np.random.default_rng(5))
        np.testing.assert_array_equal(out_a.w, out_b.w)
        assert loss_a == loss_b

    def test_updates_weights_and_reports_finite_loss(self, small_world):
        mesh, camera = small_world
        rng = np.random.default_rng(1)
        items = synthetic_items(rng, 4, camera)
        config = TrainConfig(channels=4, pairs_per_step=3)
        weights = init_weights(channels=4, seed=0)
        updated, loss = train_epoch(weights, OptimizerState.zeros(weights), items,
                                    mesh, camera, config,
                                    rng=np.random.default_rng(2))
        assert math.isfinite(loss)
        assert not np.array_equal(updated.w, weights.w)

    def test_needs_two_items(self, small_world):
        mesh, camera = small_world
        rng = np.random.default_rng(2)
        items = synthetic_items(rng, 1, camera)
        config = TrainConfig(channels=4)
        weights = init_weights(channels=4, seed=0)
        with pytest.raises(ValueError, match="two images"):
            train_epoch(weights, OptimizerState.zeros(weights), items, mesh,
                        camera, config)


def em_inputs(rng, camera, labelled_count=2, pool_count=4):
    labelled = []
    for k in range(labelled_count):
        image = rng.uniform(size=(camera.height, camera.width, 3))
        labelled.append((f"lab_{k}", image,
                         Pose(2.0 * math.pi * k / labelled_count, 0.2)))
    pool = [(f"unl_{k}", rng.uniform(size=(camera.height, camera.width, 3)))
            for k in range(pool_count)]
    return labelled, pool


class TestRunEm:
    def config(self, **kwargs):
        base = dict(channels=4, outer_iterations=2, epochs_per_iteration=2,
                    pairs_per_step=3, tau=-0.5, per_view_cap=3, step_cap=10,
                    delta_step=30 * DEG, schedule_increment=30 * DEG, seed=0)
        base.update(kwargs)
        return TrainConfig(**base)

    def test_zero_iterations_returns_seeded_init(self, small_world):
        mesh, camera = small_world
        rng = np.random.default_rng(0)
        labelled, pool = em_inputs(rng, camera)
        result = run_em(labelled, pool, mesh, camera,
                        self.config(outer_iterations=0))
        seeded = init_weights(4, seed=0)
        np.testing.assert_array_equal(
            result.weights.w, seeded.w.astype(np.float32).astype(float))
        assert len(result.pseudo_labels) == 0
        assert result.history == []
        assert result.bank.initialized.any()

    def test_history_tracks_iterations_and_schedule(self, small_world):
        mesh, camera = small_world
        rng = np.random.default_rng(1)
        labelled, pool = em_inputs(rng, camera)
        truth = {f"unl_{k}": Pose(0.5, 0.2) for k in range(4)}
        result = run_em(labelled, pool, mesh, camera, self.config(),
                        ground_truth=truth)
        assert [row.iteration for row in result.history] == [1, 2]
        assert [row.delta_range_deg for row in result.history] == pytest.approx(
            [30.0, 60.0])
        counts = [row.pseudo_count for row in result.history]
        assert counts[0] <= counts[1]
        assert counts[1] == len(result.pseudo_labels)
        for row in result.history:
            if row.pseudo_count:
                assert 0.0 <= row.pseudo_precision <= 1.0

    def test_permissive_threshold_labels_the_pool(self, small_world):
        mesh, camera = small_world
        rng = np.random.default_rng(2)
        labelled, pool = em_inputs(rng, camera, pool_count=3)
        result = run_em(labelled, pool, mesh, camera, self.config())
        assert set(result.pseudo_labels.entries) <= {"unl_0", "unl_1", "unl_2"}
        assert len(result.pseudo_labels) > 0

    def test_resume_reproduces_uninterrupted_run(self, small_world):
        mesh, camera = small_world
        rng = np.random.default_rng(3)
        labelled, pool = em_inputs(rng, camera)
        config = self.config()
        full = run_em(labelled, pool, mesh, camera, config)
        half = run_em(labelled, pool, mesh, camera,
                      self.config(outer_iterations=1))
        state = EmState(weights=half.weights, bank=half.bank,
                        pseudo_labels=half.pseudo_labels, next_iteration=2)
        resumed = run_em(labelled, pool, mesh, camera, config, state=state)
        np.testing.assert_array_equal(resumed.weights.w, full.weights.w)
        np.testing.assert_array_equal(resumed.weights.b, full.weights.b)
        np.testing.assert_array_equal(resumed.bank.features, full.bank.features)
        assert resumed.pseudo_labels.entries == full.pseudo_labels.entries
        assert [row.iteration for row in resumed.history] == [2]

    def test_single_labelled_image_and_empty_pool_is_survivable(self, small_world):
        mesh, camera = small_world
        rng = np.random.default_rng(4)
        labelled, _ = em_inputs(rng, camera, labelled_count=1, pool_count=0)
        result = run_em(labelled, [], mesh, camera, self.config())
        assert len(result.pseudo_labels) == 0
        assert all(math.isnan(row.mean_loss) for row in result.history)

    def test_pool_entry_sharing_labelled_id_is_skipped(self, small_world):
        mesh, camera = small_world
        rng = np.random.default_rng(5)
        labelled, pool = em_inputs(rng, camera)
        pool = pool + [("lab_0", rng.uniform(size=(32, 32, 3)))]
        result = run_em(labelled, pool, mesh, camera, self.config())
        assert "lab_0" not in result.pseudo_labels

    def test_duplicate_ids_rejected(self, small_world):
        mesh, camera = small_world
        rng = np.random.default_rng(6)
        labelled, pool = em_inputs(rng, camera)
        with pytest.raises(ValueError, match="unique"):
            run_em(labelled + [labelled[0]], pool, mesh, camera, self.config())
        with pytest.raises(ValueError, match="duplicate"):
            run_em(labelled, pool + [pool[0]], mesh, camera, self.config())

    def test_same_seed_runs_are_bit_identical(self, small_world):
        mesh, camera = small_world
        rng = np.random.default_rng(7)
        labelled, pool = em_inputs(rng, camera)
        config = self.config()
        first = run_em(labelled, pool, mesh, camera, config)
        second = run_em(labelled, pool, mesh, camera, config)
        np.testing.assert_array_equal(first.weights.w, second.weights.w)
        np.testing.assert_array_equal(first.bank.features, second.bank.features)
        assert first.pseudo_labels.entries == second.pseudo_labels.entries


class TestInitialCheckpoint:
    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            camera=Camera(scale=10.0, principal=(16.0, 16.0),
                          image_size=(32, 32), feature_stride=4),
            mesh_dims=(1.0, 0.6, 0.4), mesh_subdivisions=2, channels=5, seed=9)

    def test_state_derives_from_the_seed_alone(self):
        pipeline = self.pipeline()
        checkpoint = initial_checkpoint(pipeline)
        assert checkpoint.config == pipeline
        expected = init_weights(5, seed=9)
        np.testing.assert_array_equal(
            checkpoint.weights.w, expected.w.astype(np.float32).astype(float))
        assert checkpoint.bank.vertex_count == pipeline.make_mesh().vertex_count
        assert checkpoint.bank.initialized.all()
        assert len(checkpoint.pseudo_labels) == 0

    def test_replays_for_the_same_config(self):
        first = initial_checkpoint(self.pipeline())
        second = initial_checkpoint(self.pipeline())
        np.testing.assert_array_equal(first.bank.features, second.bank.features)
        np.testing.assert_array_equal(first.weights.w, second.weights.w)
