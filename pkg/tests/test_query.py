import numpy as np
import pytest

from pointvox.geom import PointCloud
from pointvox.query import NeighborSet, QueryConfig, ball_query, manhattan_distance, voxel_query
from pointvox.voxelize import GridSpec, SparseVoxelMap, voxel_centers, voxelize_mean

from oracles import manhattan_query_oracle

SPEC = GridSpec.small()


def random_map(rng, n_points=2000, stride=1, spec=SPEC):
    xyz = rng.uniform(spec.mins, spec.maxs, size=(n_points, 3))
    xyz = np.minimum(xyz, np.nextafter(spec.maxs, -np.inf))
    return voxelize_mean(PointCloud(xyz, rng.uniform(size=(n_points, 1))), spec, stride)


def random_center(rng, spec=SPEC):
    lo, hi = spec.mins, spec.maxs
    return rng.uniform(lo + 0.01, hi - 0.01)


class TestQueryConfig:
    def test_threshold_defaults_to_range(self):
        assert QueryConfig(query_range=4).manhattan_threshold == 4
        assert QueryConfig(query_range=4, manhattan_threshold=7).manhattan_threshold == 7

    def test_threshold_bounded_by_three_i(self):
        with pytest.raises(ValueError):
            QueryConfig(query_range=2, manhattan_threshold=7)

    def test_positive_fields(self):
        with pytest.raises(ValueError):
            QueryConfig(query_range=0)
        with pytest.raises(ValueError):
            QueryConfig(max_samples=0)
        with pytest.raises(ValueError):
            QueryConfig(ball_radius=0.0)


class TestManhattanDistance:
    def test_hand_case(self):
        assert manhattan_distance((3, 4, 5), (5, 2, 5)) == 4

    def test_zero_for_same_coord(self):
        assert manhattan_distance((1, 2, 3), (1, 2, 3)) == 0


class TestVoxelQuery:
    def test_threshold_zero_returns_center_voxel(self):
        rng = np.random.default_rng(0)
        vmap = random_map(rng)
        cfg = QueryConfig(query_range=1, manhattan_threshold=0)
        coord = vmap.coords[10]
        center = voxel_centers(coord[None], SPEC)[0]
        out = voxel_query(center, vmap, cfg)
        assert len(out) == 1
        np.testing.assert_array_equal(out.coords[0], coord)
        np.testing.assert_array_equal(out.offsets[0], [0, 0, 0])
        np.testing.assert_array_equal(out.features[0], vmap.get(*coord))

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            vmap = random_map(rng, n_points=int(rng.integers(200, 3000)))
            cfg = QueryConfig(
                query_range=int(rng.integers(1, 6)),
                max_samples=int(rng.integers(1, 32)),
            )
            center = random_center(rng)
            from pointvox.voxelize import point_to_voxel

            got = voxel_query(center, vmap, cfg)
            want = manhattan_query_oracle(
                point_to_voxel(center, SPEC, vmap.stride),
                vmap,
                cfg.query_range,
                cfg.manhattan_threshold,
                cfg.max_samples,
            )
            assert len(got) == len(want)
            for row, (coord, off) in enumerate(want):
                assert tuple(got.coords[row]) == coord
                assert tuple(got.offsets[row]) == off
                np.testing.assert_array_equal(got.features[row], vmap.get(*coord))

    def test_candidate_bound(self):
        rng = np.random.default_rng(2)
        cfg = QueryConfig(query_range=4)
        bound = (2 * 4 + 1) ** 3
        for n in (100, 5000):
            vmap = random_map(rng, n_points=n)
            for _ in range(10):
                out = voxel_query(random_center(rng), vmap, cfg)
                assert out.visited <= bound

    def test_every_neighbor_satisfies_predicate(self):
        rng = np.random.default_rng(3)
        vmap = random_map(rng)
        cfg = QueryConfig(query_range=3, manhattan_threshold=3, max_samples=64)
        out = voxel_query(random_center(rng), vmap, cfg)
        for off in out.offsets:
            assert abs(off).sum() <= 3
            assert abs(off).max() <= 3

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        vmap = random_map(rng)
        center = random_center(rng)
        cfg = QueryConfig()
        a = voxel_query(center, vmap, cfg)
        b = voxel_query(center, vmap, cfg)
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.features, b.features)
        assert a.visited == b.visited

    def test_empty_result_allowed(self):
        vmap = SparseVoxelMap(SPEC, 1, np.array([[100, 100, 10]]), np.zeros((1, 4)))
        out = voxel_query(SPEC.mins + 0.01, vmap, QueryConfig(query_range=2))
        assert len(out) == 0
        assert out.features.shape == (0, 4)

    def test_truncation_stops_early(self):
        rng = np.random.default_rng(5)
        vmap = random_map(rng, n_points=20000)
        cfg_all = QueryConfig(query_range=4, max_samples=729)
        cfg_one = QueryConfig(query_range=4, max_samples=1)
        center = voxel_centers(vmap.coords[50][None], SPEC)[0]
        full = voxel_query(center, vmap, cfg_all)
        one = voxel_query(center, vmap, cfg_one)
        assert len(one) == 1
        np.testing.assert_array_equal(one.coords[0], full.coords[0])
        assert one.visited <= full.visited

    def test_stride_respected(self):
        rng = np.random.default_rng(6)
        vmap = random_map(rng, stride=4)
        out = voxel_query(random_center(rng), vmap, QueryConfig(query_range=2, max_samples=99))
        assert (out.coords < np.asarray(SPEC.strided_dims(4))).all()


class TestBallQuery:
    def test_tiny_radius_at_voxel_center(self):
        rng = np.random.default_rng(7)
        vmap = random_map(rng)
        coord = vmap.coords[3]
        center = voxel_centers(coord[None], SPEC)[0]
        cfg = QueryConfig(ball_radius=min(SPEC.voxel_size) / 2.01)
        out = ball_query(center, vmap, cfg)
        assert len(out) == 1
        np.testing.assert_array_equal(out.coords[0], coord)

    def test_radius_spanning_grid_returns_everything(self):
        rng = np.random.default_rng(8)
        vmap = random_map(rng, n_points=300)
        cfg = QueryConfig(ball_radius=1e3, max_samples=10**6)
        out = ball_query(random_center(rng), vmap, cfg)
        assert len(out) == len(vmap)
        assert out.visited == len(vmap)

    def test_matches_linear_filter_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            vmap = random_map(rng, n_points=int(rng.integers(100, 1500)))
            center = random_center(rng)
            cfg = QueryConfig(ball_radius=float(rng.uniform(0.3, 3.0)), max_samples=24)
            out = ball_query(center, vmap, cfg)
            centers = voxel_centers(vmap.coords, SPEC)
            d = np.linalg.norm(centers - center, axis=1)
            inside = np.flatnonzero(d <= cfg.ball_radius)
            order = sorted(
                inside, key=lambda r: (d[r], tuple(vmap.coords[r]))
            )[: cfg.max_samples]
            np.testing.assert_array_equal(out.coords, vmap.coords[order])
            np.testing.assert_array_equal(out.features, vmap.features[order])

    def test_empty_map(self):
        vmap = SparseVoxelMap(SPEC, 1, np.empty((0, 3)), np.empty((0, 4)))
        out = ball_query(SPEC.mins + 0.5, vmap, QueryConfig())
        assert len(out) == 0 and out.visited == 0
