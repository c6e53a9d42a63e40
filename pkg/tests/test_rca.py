import logging

import numpy as np
import pytest

from modules.gaussian import covariance, gaussian_falloff, quat_normalize
from modules.rca import RcaConfig, check_tau_dist, default_tau_dist, rca_aggregate, window_neighbors
from modules.ris import RayBatch, SampleStream, ris_sample_batch
from modules.scene import AnchorSet
from modules.synthetic import generate_synthetic_scene


def _stream(positions, anchor_index, groups=None):
    positions = np.asarray(positions, dtype=np.float64)
    count = positions.shape[0]
    offsets = np.array(groups if groups is not None else [0, count], dtype=np.int64)
    slots = np.repeat(np.arange(offsets.shape[0] - 1), np.diff(offsets))
    return SampleStream(slots, np.asarray(anchor_index, dtype=np.int64), positions[:, 2].copy(), positions, offsets)


class TestWindowNeighbors:
    def test_group_of_one(self):
        assert window_neighbors(0, range(0, 1), 2) == [0]

    def test_left_clip(self):
        assert window_neighbors(0, range(0, 10), 2) == [0, 1, 2]

    def test_interior(self):
        assert window_neighbors(5, range(0, 10), 2) == [3, 4, 5, 6, 7]

    def test_no_wraparound_into_next_group(self):
        assert window_neighbors(11, (10, 13), 2) == [10, 11, 12]


class TestRcaConfig:
    def test_rejects_negative_window(self):
        with pytest.raises(ValueError):
            RcaConfig(half_window=-1)

    def test_resolve_derives_tau_from_scales(self):
        anchors = AnchorSet.create(np.zeros((2, 3)), scales=[[0.1, 0.2, 0.3], [0.5, 0.1, 0.1]])
        resolved = RcaConfig(tau_dist=None).resolve(anchors)
        assert resolved.tau_dist == pytest.approx(default_tau_dist(anchors))
        assert resolved.tau_dist == pytest.approx(4.0 * 0.4)

    def test_check_tau_warns_when_too_small(self, caplog):
        anchors = AnchorSet.create(np.zeros((1, 3)), scales=[[1.0, 1.0, 1.0]])
        with caplog.at_level(logging.WARNING, logger="modules.rca"):
            assert not check_tau_dist(1.0, anchors, 6.25)
        assert "tau_dist" in caplog.text
        assert check_tau_dist(3.0, anchors, 6.25)


class TestAggregate:
    def test_single_sample_on_own_anchor(self):
        feature = np.arange(32, dtype=np.float64)
        anchors = AnchorSet.create([[0.0, 0.0, 2.0]], features=[feature])
        agg = rca_aggregate(_stream([[0.0, 0.0, 2.0]], [0]), anchors, RcaConfig(tau_dist=1.0))
        assert agg.weights[0, agg.mask[0]].tolist() == [1.0]
        np.testing.assert_array_equal(agg.feature_hat[0], feature)
        assert agg.alpha_hat[0] == pytest.approx(0.5)
        assert agg.valid[0]

    def test_symmetric_neighbors_share_weight(self):
        features = np.stack([np.full(32, 1.0), np.full(32, 3.0)])
        anchors = AnchorSet.create([[-0.1, 0.0, 2.0], [0.1, 0.0, 2.0]], features=features)
        agg = rca_aggregate(_stream([[0.0, 0.0, 2.0], [0.0, 0.0, 2.0]], [0, 1]), anchors, RcaConfig(tau_dist=1.0))
        for k in range(2):
            assert sorted(agg.weights[k][agg.mask[k]].tolist()) == [0.5, 0.5]
            np.testing.assert_allclose(agg.feature_hat[k], np.full(32, 2.0))

    def test_masked_neighbor_matches_direct_softmax(self):
        rng = np.random.default_rng(0)
        positions = np.column_stack([np.zeros(5), np.zeros(5), np.arange(1.0, 6.0)])
        means = positions + rng.normal(scale=0.05, size=(5, 3))
        means[4] = positions[4] + np.array([5.0, 0.0, 0.0])
        rotations = quat_normalize(rng.normal(size=(5, 4)))
        scales = rng.uniform(0.5, 1.5, size=(5, 3))
        anchors = AnchorSet.create(means, rotations=rotations, scales=scales,
                                   opacity_logits=rng.normal(size=5), features=rng.normal(size=(5, 32)))
        agg = rca_aggregate(_stream(positions, np.arange(5)), anchors, RcaConfig(half_window=2, tau_dist=3.0))

        k = 2
        np.testing.assert_array_equal(agg.neighbors[k], [0, 1, 2, 3, 4])
        assert agg.weights[k, 4] == 0.0
        logits = []
        for j in range(4):
            offset = positions[k] - means[j]
            precision = np.linalg.inv(covariance(rotations[j], scales[j]))
            logits.append(-0.5 * offset @ precision @ offset)
        logits = np.array(logits)
        expected = np.exp(logits - logits.max())
        expected /= expected.sum()
        np.testing.assert_allclose(agg.weights[k, :4], expected, rtol=1e-9)
        np.testing.assert_allclose(agg.feature_hat[k], expected @ anchors.features[:4], rtol=1e-9)
        opacity = 1.0 / (1.0 + np.exp(-anchors.opacity_logits[:4]))
        assert agg.alpha_hat[k] == pytest.approx(float(expected @ (np.exp(logits) * opacity)), rel=1e-9)

    def test_all_invalid_window(self):
        anchors = AnchorSet.create([[0.0, 0.0, 0.0]], features=np.ones((1, 32)))
        agg = rca_aggregate(_stream([[100.0, 0.0, 0.0]], [0]), anchors, RcaConfig(tau_dist=1.0))
        assert not agg.valid[0]
        np.testing.assert_array_equal(agg.weights[0], 0.0)
        np.testing.assert_array_equal(agg.feature_hat[0], 0.0)
        assert agg.alpha_hat[0] == 0.0

    def test_windows_do_not_cross_rays(self):
        anchors = AnchorSet.create(np.tile([[0.0, 0.0, 2.0]], (4, 1)))
        agg = rca_aggregate(_stream(np.tile([[0.0, 0.0, 2.0]], (4, 1)), np.arange(4), groups=[0, 2, 4]), anchors,
                            RcaConfig(tau_dist=1.0))
        for k, allowed in ((0, {0, 1}), (1, {0, 1}), (2, {2, 3}), (3, {2, 3})):
            assert set(agg.neighbors[k][agg.mask[k]].tolist()) == allowed

    def test_empty_stream(self, collinear_scene):
        agg = rca_aggregate(SampleStream.empty(3), collinear_scene.anchors)
        assert len(agg) == 0
        assert agg.feature_hat.shape == (0, 32)

    def test_partition_of_unity(self):
        scene, _ = generate_synthetic_scene("random-box", 2000, seed=4, hidden=8)
        rng = np.random.default_rng(1)
        directions = rng.normal(size=(300, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        rays = RayBatch(-3.0 * directions + rng.uniform(-0.3, 0.3, size=(300, 3)), directions)
        stream = ris_sample_batch(rays, scene.bvh(6.25), scene.anchors)
        agg = rca_aggregate(stream, scene.anchors)
        assert len(stream) > 0
        sums = agg.weights.sum(axis=1)
        np.testing.assert_allclose(sums[agg.valid], 1.0, atol=1e-12)
        np.testing.assert_array_equal(sums[~agg.valid], 0.0)
        assert np.all(agg.weights[~agg.mask] == 0.0)

    def test_two_clusters_do_not_mix(self):
        scene, _ = generate_synthetic_scene("two-cluster", 400, seed=2, hidden=8)
        anchors = scene.anchors
        rng = np.random.default_rng(3)
        origins = np.column_stack([np.full(60, -10.0), rng.uniform(-0.15, 0.15, size=(60, 2))])
        rays = RayBatch(origins, np.tile([1.0, 0.0, 0.0], (60, 1)))
        stream = ris_sample_batch(rays, scene.bvh(6.25), anchors)
        agg = rca_aggregate(stream, anchors)
        side = anchors.means[:, 0] > 0.0
        sample_side = side[stream.anchor_index]
        neighbor_side = side[agg.anchors]
        crossing = neighbor_side != sample_side[:, None]
        assert np.any(crossing & (agg.neighbors != np.arange(len(stream))[:, None]))
        assert np.all(agg.weights[crossing] == 0.0)

    def test_falloff_is_gaussian_of_delta_sq(self):
        rng = np.random.default_rng(6)
        positions = np.column_stack([rng.normal(scale=0.2, size=(4, 2)), np.arange(2.0, 6.0)])
        anchors = AnchorSet.create(positions + rng.normal(scale=0.1, size=(4, 3)), scales=np.full((4, 3), 0.4),
                                   features=rng.normal(size=(4, 32)))
        agg = rca_aggregate(_stream(positions, np.arange(4)), anchors, RcaConfig(tau_dist=2.0, logit_scale=0.7))
        np.testing.assert_array_equal(agg.falloff, gaussian_falloff(agg.delta_sq, 0.7))

    def test_far_anchor_changes_do_not_reach_other_windows(self):
        rng = np.random.default_rng(8)
        near = np.column_stack([np.zeros(3), np.zeros(3), [2.0, 2.5, 3.0]])
        positions = np.concatenate([near, [[40.0, 0.0, 0.0]]])
        means = np.concatenate([near + rng.normal(scale=0.05, size=(3, 3)), [[40.0, 0.0, 0.1], [-40.0, 5.0, 0.0]]])
        anchors = AnchorSet.create(means, scales=np.full((5, 3), 0.5), opacity_logits=rng.normal(size=5),
                                   features=rng.normal(size=(5, 32)))
        stream = _stream(positions, [0, 1, 2, 3], groups=[0, 3, 4])
        cfg = RcaConfig(half_window=2, tau_dist=1.5)
        before = rca_aggregate(stream, anchors, cfg)

        for far in (3, 4):
            anchors.means[far] += [0.3, -0.2, 0.4]
            anchors.features[far] = rng.normal(size=32)
            anchors.opacity_logits[far] += 2.0
            anchors.scales[far] = [0.9, 0.3, 0.6]
        after = rca_aggregate(stream, anchors, cfg)
        np.testing.assert_array_equal(after.feature_hat[:3], before.feature_hat[:3])
        np.testing.assert_array_equal(after.alpha_hat[:3], before.alpha_hat[:3])
        assert not np.array_equal(after.feature_hat[3], before.feature_hat[3])
