import math

import numpy as np
import pytest

from pointvox.geom import Box3D, PointCloud
from pointvox.sampling import (
    MlpScoring,
    MlpWeights,
    OracleScoring,
    SamplingConfig,
    ScoredPoints,
    binary_cross_entropy,
    fps,
    group_and_pool,
    label_foreground,
    mlp_forward,
    mlp_scores,
    oracle_scores,
    sa_layer_forward,
    score_provider,
    seg_loss,
    sfps,
)

from oracles import fps_oracle, seg_loss_oracle, sfps_oracle


def line_cloud(values):
    xyz = np.zeros((len(values), 3))
    xyz[:, 0] = values
    return PointCloud(xyz)


def synthetic_scene(rng, n_points=400, fg_fraction=0.05):
    """Background scattered over a wide area, foreground clustered in one box."""
    box = Box3D(
        cx=rng.uniform(5, 15), cy=rng.uniform(-5, 5), cz=0.0,
        l=3.5, w=1.6, h=1.5, yaw=rng.uniform(-math.pi, math.pi),
    )
    n_fg = int(round(n_points * fg_fraction))
    local = rng.uniform(-0.5, 0.5, size=(n_fg, 3)) * box.size * 0.98
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    fg = local @ rot.T + box.center
    bg = rng.uniform([0, -10, -2], [20, 10, 1], size=(n_points - n_fg, 3))
    xyz = np.vstack([fg, bg])
    perm = rng.permutation(n_points)
    cloud = PointCloud(xyz[perm])
    return cloud, [box]


class TestLabelForeground:
    def test_no_boxes(self):
        cloud = PointCloud(np.random.default_rng(0).uniform(size=(50, 3)))
        assert label_foreground(cloud, []).sum() == 0

    def test_huge_box(self):
        cloud = PointCloud(np.random.default_rng(1).uniform(-1, 1, size=(50, 3)))
        box = Box3D(0, 0, 0, 100, 100, 100)
        assert label_foreground(cloud, [box]).sum() == 50

    def test_mixed_scene_matches_per_pair_oracle(self):
        rng = np.random.default_rng(2)
        cloud = PointCloud(rng.uniform(-8, 8, size=(200, 3)))
        boxes = [
            Box3D(rng.uniform(-5, 5), rng.uniform(-5, 5), 0, 2, 1, 2, yaw=rng.uniform(-3, 3))
            for _ in range(4)
        ]
        from pointvox.geom import point_in_box

        want = np.array(
            [int(any(point_in_box(p, b) for b in boxes)) for p in cloud.xyz], dtype=np.int8
        )
        np.testing.assert_array_equal(label_foreground(cloud, boxes), want)


class TestScoreProvider:
    def test_oracle_sigma_zero_returns_labels(self):
        labels = np.array([0, 1, 1, 0, 1], dtype=np.int8)
        cloud = PointCloud(np.zeros((5, 3)))
        sp = score_provider(cloud, OracleScoring(labels))
        np.testing.assert_array_equal(sp.scores, labels.astype(float))

    def test_oracle_noise_clamped_and_seeded(self):
        labels = np.array([0, 1] * 50)
        a = oracle_scores(labels, sigma=0.5, seed=9)
        b = oracle_scores(labels, sigma=0.5, seed=9)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert not np.array_equal(a, labels.astype(float))

    def test_zero_weights_give_half(self):
        w = MlpWeights((
            (np.zeros((8, 4)), np.zeros(8)),
            (np.zeros((1, 8)), np.zeros(1)),
        ))
        cloud = PointCloud(np.ones((6, 3)), np.ones((6, 1)))
        sp = score_provider(cloud, MlpScoring(w))
        np.testing.assert_array_equal(sp.scores, np.full(6, 0.5))

    def test_matches_dense_matrix_oracle(self):
        rng = np.random.default_rng(3)
        d, h = 5, 7
        w1 = rng.normal(size=(h, d))
        b1 = rng.normal(size=h)
        w2 = rng.normal(size=(1, h))
        b2 = rng.normal(size=1)
        feats = rng.normal(size=(30, d))
        got = mlp_scores(feats, MlpWeights(((w1, b1), (w2, b2))))
        for i in range(len(feats)):
            hidden = [
                max(0.0, sum(w1[r, c] * feats[i, c] for c in range(d)) + b1[r])
                for r in range(h)
            ]
            z = sum(w2[0, r] * hidden[r] for r in range(h)) + b2[0]
            want = 1.0 / (1.0 + math.exp(-z))
            assert got[i] == pytest.approx(want, abs=1e-9)

    def test_dimension_mismatch_raises(self):
        w = MlpWeights(((np.zeros((4, 3)), np.zeros(4)), (np.zeros((1, 4)), np.zeros(1))))
        with pytest.raises(ValueError, match="does not match"):
            mlp_scores(np.zeros((5, 7)), w)

    def test_mlp_weights_validation(self):
        with pytest.raises(ValueError):
            MlpWeights(((np.zeros((4, 3)), np.zeros(4)), (np.zeros((1, 5)), np.zeros(1))))


class TestFps:
    def test_all_points_when_m_equals_count(self):
        rng = np.random.default_rng(4)
        xyz = rng.normal(size=(12, 3))
        idx = fps(xyz, 12)
        assert sorted(idx) == list(range(12))
        assert idx[0] == 0

    def test_hand_case_on_a_line(self):
        idx = fps(line_cloud([0.0, 1.0, 2.0, 3.0, 10.0]), 3)
        np.testing.assert_array_equal(idx, [0, 4, 3])

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            xyz = rng.normal(size=(40, 3))
            m = int(rng.integers(1, 41))
            np.testing.assert_array_equal(fps(xyz, m), fps_oracle(xyz, m))

    def test_duplicates_still_distinct(self):
        xyz = np.zeros((6, 3))
        idx = fps(xyz, 6)
        assert sorted(idx) == list(range(6))

    def test_m_too_large(self):
        with pytest.raises(ValueError):
            fps(np.zeros((3, 3)), 4)


class TestSfps:
    def test_first_pick_is_score_argmax_lowest_tie(self):
        sp = ScoredPoints(line_cloud([0, 1, 2, 3, 10]), np.array([0.9, 0.1, 0.1, 0.9, 0.1]))
        assert sfps(sp, 1)[0] == 0

    def test_hand_run_line_case(self):
        sp = ScoredPoints(line_cloud([0, 1, 2, 3, 10]), np.array([0.9, 0.1, 0.1, 0.9, 0.1]))
        np.testing.assert_array_equal(sfps(sp, 3, gamma=1.0), [0, 3, 4])

    def test_constant_scores_reduce_to_fps(self):
        rng = np.random.default_rng(6)
        for c in (0.2, 0.5, 1.0):
            xyz = rng.normal(size=(30, 3))
            sp = ScoredPoints(PointCloud(xyz), np.full(30, c))
            np.testing.assert_array_equal(sfps(sp, 10), fps(xyz, 10))

    def test_all_zero_scores_fall_back_to_plain_distance(self):
        rng = np.random.default_rng(7)
        xyz = rng.normal(size=(25, 3))
        sp = ScoredPoints(PointCloud(xyz), np.zeros(25))
        np.testing.assert_array_equal(sfps(sp, 8), fps(xyz, 8))

    def test_matches_literal_algorithm_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(15):
            n = int(rng.integers(4, 30))
            xyz = rng.normal(size=(n, 3)) * 3
            scores = rng.uniform(size=n)
            m = int(rng.integers(1, n + 1))
            gamma = float(rng.uniform(0.3, 4.0))
            got = sfps(ScoredPoints(PointCloud(xyz), scores), m, gamma)
            np.testing.assert_array_equal(got, sfps_oracle(xyz, scores, m, gamma))

    def test_topk_mode_returns_descending_scores(self):
        sp = ScoredPoints(line_cloud([0, 1, 2, 3, 4]), np.array([0.3, 0.9, 0.1, 0.9, 0.5]))
        np.testing.assert_array_equal(sfps(sp, 3, mode="topk"), [1, 3, 4])

    def test_large_gamma_matches_topk_on_separated_scores(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            n = 9
            # jittered grid: min separation ~0.5, diameter ~20 => distance
            # ratios tiny against e^{100 * 0.1}
            base = np.arange(n, dtype=float) * 2.5
            xyz = np.zeros((n, 3))
            xyz[:, 0] = base + rng.uniform(-0.5, 0.5, size=n)
            xyz[:, 1] = rng.uniform(-2, 2, size=n)
            scores = rng.permutation(np.linspace(0.05, 0.95, n))
            sp = ScoredPoints(PointCloud(xyz), scores)
            np.testing.assert_array_equal(
                sfps(sp, 6, gamma=100.0), sfps(sp, 6, mode="topk")
            )

    def test_distinct_indices_always(self):
        rng = np.random.default_rng(10)
        xyz = np.vstack([np.zeros((5, 3)), rng.normal(size=(5, 3))])
        sp = ScoredPoints(PointCloud(xyz), rng.uniform(size=10))
        idx = sfps(sp, 10)
        assert sorted(idx) == list(range(10))

    def test_invalid_mode_and_gamma(self):
        sp = ScoredPoints(line_cloud([0, 1]), np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            sfps(sp, 1, mode="best")
        with pytest.raises(ValueError):
            sfps(sp, 1, gamma=0.0)


class TestForegroundPreference:
    def test_sfps_never_below_fps_for_small_gammas(self):
        # oracle-scored scenes, 5% foreground: rectified selection should hold
        # at least as many foreground points as plain FPS for every gamma
        counts = {g: 0 for g in (1.0, 2.0, 3.0)}
        fps_total = 0
        for seed in range(50):
            rng = np.random.default_rng(100 + seed)
            cloud, boxes = synthetic_scene(rng)
            labels = label_foreground(cloud, boxes)
            sp = ScoredPoints(cloud, labels.astype(float))
            m = 32
            fps_total += int(labels[fps(cloud, m)].sum())
            for g in counts:
                counts[g] += int(labels[sfps(sp, m, gamma=g)].sum())
        for g, total in counts.items():
            assert total >= fps_total, f"gamma={g}"


class TestSegLoss:
    def test_perfect_scores_near_zero(self):
        cfg = SamplingConfig()
        labels = [np.array([1.0, 0.0, 1.0]), np.array([0.0, 0.0])]
        loss = seg_loss([l.copy() for l in labels], labels, cfg)
        bound = cfg.num_layers * max(cfg.layer_weights) * -math.log(1 - 1e-7)
        assert 0.0 <= loss <= bound

    def test_single_point_half_score(self):
        cfg = SamplingConfig()
        loss = seg_loss([np.array([0.5])], [np.array([1.0])], cfg)
        assert loss == pytest.approx(0.1 * math.log(2), abs=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(11)
        cfg = SamplingConfig()
        for _ in range(20):
            scores = [rng.uniform(size=int(n)) for n in (17, 9, 5, 3)]
            labels = [rng.integers(0, 2, size=len(s)).astype(float) for s in scores]
            got = seg_loss(scores, labels, cfg)
            want = seg_loss_oracle(scores, labels, cfg.layer_weights)
            assert got == pytest.approx(want, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            seg_loss([np.zeros(3)], [np.zeros(4)])

    def test_bce_clamps_extremes(self):
        v = binary_cross_entropy(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        assert np.isfinite(v).all()
        np.testing.assert_allclose(v, -math.log(1e-7), rtol=1e-9)


class TestSaLayer:
    def _weights(self, d_in, out=6, seed=0):
        rng = np.random.default_rng(seed)
        return MlpWeights.random((d_in, 8, out), rng)

    def test_empty_radius_contributes_zeros(self):
        # lone far-away keypoint candidate: tiny radii catch only itself
        xyz = np.array([[0.0, 0, 0], [50.0, 0, 0]])
        feats = np.array([[1.0, 2.0], [3.0, 4.0]])
        w = self._weights(5)
        pooled = group_and_pool(np.array([[25.0, 0, 0]]), xyz, feats, 0.5, w)
        np.testing.assert_array_equal(pooled, np.zeros((1, 6)))

    def test_singleton_group_equals_transformed_vector(self):
        rng = np.random.default_rng(12)
        xyz = rng.normal(size=(4, 3)) * 10
        feats = rng.normal(size=(4, 2))
        w = self._weights(5)
        pooled = group_and_pool(xyz[:1], xyz, feats, 0.1, w)
        want = mlp_forward(np.concatenate([feats[0], np.zeros(3)]), w)
        np.testing.assert_allclose(pooled[0], want, atol=1e-12)

    def test_group_permutation_invariance(self):
        rng = np.random.default_rng(13)
        xyz = rng.normal(size=(30, 3))
        feats = rng.normal(size=(30, 4))
        w = self._weights(7)
        kp = xyz[:5]
        perm = rng.permutation(30)
        a = group_and_pool(kp, xyz, feats, 1.5, w)
        b = group_and_pool(kp, xyz[perm], feats[perm], 1.5, w)
        np.testing.assert_array_equal(a, b)

    def test_matches_dense_brute_force_oracle(self):
        rng = np.random.default_rng(14)
        n = 40
        cloud = PointCloud(rng.uniform(0, 4, size=(n, 3)), rng.normal(size=(n, 1)))
        feats = cloud.point_vectors()
        cfg = SamplingConfig(layer_counts=(8, 6, 4, 2), radii=((0.8, 1.6),) * 4)
        seg = MlpWeights.random((4, 8, 1), rng)
        grp = self._weights(7, out=5, seed=3)
        sp = ScoredPoints(cloud, np.zeros(n))
        selected, agg = sa_layer_forward(sp, feats, 2, cfg, seg, grp)

        scores = mlp_scores(feats, seg)
        idx = sfps(ScoredPoints(cloud, scores), 6, cfg.gamma)
        np.testing.assert_array_equal(selected.points.xyz, cloud.xyz[idx])
        np.testing.assert_allclose(selected.scores, scores[idx], atol=1e-15)
        for row, i in enumerate(idx):
            parts = []
            for r in (0.8, 1.6):
                best = None
                for j in range(n):
                    if math.dist(cloud.xyz[i], cloud.xyz[j]) <= r:
                        vec = mlp_forward(
                            np.concatenate([feats[j], cloud.xyz[j] - cloud.xyz[i]]), grp
                        )
                        best = vec if best is None else np.maximum(best, vec)
                parts.append(best if best is not None else np.zeros(5))
            np.testing.assert_allclose(agg[row], np.concatenate(parts), atol=1e-9)

    def test_layer_one_uses_plain_fps_and_keeps_scores(self):
        rng = np.random.default_rng(15)
        cloud = PointCloud(rng.normal(size=(20, 3)))
        sp = ScoredPoints(cloud, rng.uniform(size=20))
        cfg = SamplingConfig(layer_counts=(5, 4, 3, 2))
        grp = self._weights(3 + 3)
        selected, agg = sa_layer_forward(sp, cloud.point_vectors(), 1, cfg, None, grp)
        idx = fps(cloud, 5)
        np.testing.assert_array_equal(selected.points.xyz, cloud.xyz[idx])
        np.testing.assert_array_equal(selected.scores, sp.scores[idx])
        assert agg.shape == (5, 12)

    def test_layer_two_requires_seg_weights(self):
        cloud = PointCloud(np.random.default_rng(16).normal(size=(10, 3)))
        sp = ScoredPoints(cloud, np.zeros(10))
        cfg = SamplingConfig(layer_counts=(8, 4, 2, 1))
        with pytest.raises(ValueError, match="segmentation weights"):
            sa_layer_forward(sp, cloud.point_vectors(), 2, cfg, None, self._weights(6))


class TestConfigValidation:
    def test_counts_must_decrease(self):
        with pytest.raises(ValueError):
            SamplingConfig(layer_counts=(100, 100, 50, 25))

    def test_gamma_positive(self):
        with pytest.raises(ValueError):
            SamplingConfig(gamma=0.0)

    def test_scored_points_validation(self):
        cloud = PointCloud(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            ScoredPoints(cloud, np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            ScoredPoints(cloud, np.array([0.5, 1.5, 0.0]))
