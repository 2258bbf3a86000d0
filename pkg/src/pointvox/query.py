"""Neighbor retrieval around keypoints over a sparse voxel map.

Two strategies are provided. ``ball_query`` is the O(N) baseline: it scans
every occupied voxel and keeps those whose center falls within a Euclidean
radius. ``voxel_query`` converts the keypoint to a voxel coordinate and walks
a precomputed offset table of at most (2I+1)^3 cells in ascending Manhattan
distance, so its cost is bounded by the neighborhood size K and independent of
the total occupancy N.

Both return deterministically ordered neighbor sets, so truncation to
``max_samples`` is well-defined and repeated runs are identical.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .voxelize import GridSpec, SparseVoxelMap, points_to_voxels, voxel_centers


@dataclass(frozen=True)
class QueryConfig:
    """Neighbor-query knobs.

    Attributes:
        query_range: half-width I of the offset cube walked by voxel_query.
        max_samples: neighbor cap per keypoint.
        manhattan_threshold: keep cells with |di|+|dj|+|dk| <= threshold;
            defaults to ``query_range`` and may not exceed 3 * query_range.
        ball_radius: Euclidean radius (meters) used by ball_query.
    """

    query_range: int = 4
    max_samples: int = 16
    manhattan_threshold: int | None = None
    ball_radius: float = 1.0

    def __post_init__(self) -> None:
        if self.query_range < 1:
            raise ValueError("query_range must be a positive integer")
        if self.max_samples < 1:
            raise ValueError("max_samples must be >= 1")
        if self.manhattan_threshold is None:
            object.__setattr__(self, "manhattan_threshold", self.query_range)
        if not 0 <= self.manhattan_threshold <= 3 * self.query_range:
            raise ValueError("manhattan_threshold must lie in [0, 3 * query_range]")
        if self.ball_radius <= 0:
            raise ValueError("ball_radius must be positive")


@dataclass(eq=False)
class NeighborSet:
    """Neighbors of one keypoint: voxel coordinates, features, integer offsets.

    ``offsets`` are voxel-unit deltas from the keypoint's own voxel coordinate.
    ``visited`` counts candidate cells examined (occupied voxels scanned for
    ball_query; offset-table entries walked for voxel_query).
    """

    coords: np.ndarray
    features: np.ndarray
    offsets: np.ndarray
    visited: int

    def __len__(self) -> int:
        return len(self.coords)

    @staticmethod
    def empty(feature_dim: int, visited: int = 0) -> "NeighborSet":
        return NeighborSet(
            np.empty((0, 3), dtype=np.int64),
            np.empty((0, feature_dim)),
            np.empty((0, 3), dtype=np.int64),
            visited,
        )


def manhattan_distance(a, b) -> int:
    """Sum of absolute coordinate differences between two integer voxel coords."""
    return int(abs(a[0] - b[0]) + abs(a[1] - b[1]) + abs(a[2] - b[2]))


@lru_cache(maxsize=32)
def _offset_table(query_range: int, threshold: int) -> tuple[tuple[int, int, int], ...]:
    """Offsets in [-I, I]^3 with d_man <= threshold, ascending d_man then lexicographic."""
    span = range(-query_range, query_range + 1)
    offsets = [
        d for d in itertools.product(span, span, span)
        if abs(d[0]) + abs(d[1]) + abs(d[2]) <= threshold
    ]
    offsets.sort(key=lambda d: (abs(d[0]) + abs(d[1]) + abs(d[2]), d))
    return tuple(offsets)


def voxel_query(center, vmap: SparseVoxelMap, cfg: QueryConfig) -> NeighborSet:
    """Manhattan-bounded neighbor lookup around a keypoint.

    The keypoint is mapped to its voxel coordinate at the map's stride; offsets
    are then enumerated in ascending Manhattan distance (ties lexicographic),
    keeping occupied cells until ``max_samples`` neighbors are found. At most
    (2I+1)^3 cells are ever examined, regardless of map occupancy.

    Args:
        center: keypoint (3,) world coordinates, inside the grid range.
        vmap: the voxel map to query.
        cfg: query parameters.

    Returns:
        NeighborSet in enumeration order.
    """
    ci, cj, ck = points_to_voxels(np.asarray(center).reshape(1, 3), vmap.spec, vmap.stride)[0]
    li, lj, lk = vmap.dims
    coords: list[tuple[int, int, int]] = []
    offsets: list[tuple[int, int, int]] = []
    rows: list[int] = []
    visited = 0
    for di, dj, dk in _offset_table(cfg.query_range, cfg.manhattan_threshold):
        visited += 1
        i, j, k = ci + di, cj + dj, ck + dk
        if not (0 <= i < li and 0 <= j < lj and 0 <= k < lk):
            continue
        row = vmap.row(i, j, k)
        if row is None:
            continue
        coords.append((i, j, k))
        offsets.append((di, dj, dk))
        rows.append(row)
        if len(rows) == cfg.max_samples:
            break
    if not rows:
        return NeighborSet.empty(vmap.feature_dim, visited)
    return NeighborSet(
        np.array(coords, dtype=np.int64),
        vmap.features[rows],
        np.array(offsets, dtype=np.int64),
        visited,
    )


def ball_query(center, vmap: SparseVoxelMap, cfg: QueryConfig) -> NeighborSet:
    """Brute-force Euclidean neighbor lookup over every occupied voxel.

    Keeps voxels whose center lies within ``cfg.ball_radius`` of the keypoint,
    ordered by ascending distance then lexicographic coordinate, truncated to
    ``max_samples``. Cost is O(N) in the number of occupied voxels.
    """
    center = np.asarray(center, dtype=np.float64).reshape(3)
    n = len(vmap)
    if n == 0:
        return NeighborSet.empty(vmap.feature_dim, 0)
    centers = voxel_centers(vmap.coords, vmap.spec, vmap.stride)
    delta = centers - center
    dist2 = np.einsum("ij,ij->i", delta, delta)
    hit = np.flatnonzero(dist2 <= cfg.ball_radius * cfg.ball_radius)
    if len(hit) == 0:
        return NeighborSet.empty(vmap.feature_dim, n)
    c = vmap.coords[hit]
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0], dist2[hit]))[: cfg.max_samples]
    keep = hit[order]
    kp_coord = points_to_voxels(center.reshape(1, 3), vmap.spec, vmap.stride)[0]
    return NeighborSet(
        vmap.coords[keep],
        vmap.features[keep],
        vmap.coords[keep] - kp_coord,
        n,
    )
