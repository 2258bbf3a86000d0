"""Range cropping, mean-feature voxelization, and point/voxel coordinate transforms.

A point maps to its voxel by ``floor((coord - min) / (size * stride))``; the
crop range is half-open ``[min, max)`` per axis so every in-range point lands
on a valid coordinate. Voxel grids at strides above 1 are produced by
voxelizing at that stride directly (mean pooling); externally computed
per-voxel features can be wrapped in :class:`SparseVoxelMap` as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import PointCloud


@dataclass(frozen=True)
class GridSpec:
    """World range and voxel size of a regular 3D grid.

    Attributes:
        x_range, y_range, z_range: (min, max) in meters per axis; max > min.
        voxel_size: (vx, vy, vz) in meters, each > 0.
    """

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]
    voxel_size: tuple[float, float, float]

    def __post_init__(self) -> None:
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not (hi > lo):
                raise ValueError(f"range max must exceed min, got ({lo}, {hi})")
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError(f"voxel sizes must be positive, got {self.voxel_size}")

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    @property
    def sizes(self) -> np.ndarray:
        return np.asarray(self.voxel_size, dtype=np.float64)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(L, W, H) voxel counts: ceil(extent / size) per axis.

        A relative 1e-9 tolerance absorbs float noise in the quotient so
        mathematically-integer cell counts never round up by one.
        """
        ext = self.maxs - self.mins
        return tuple(
            int(math.ceil(q - 1e-9 * max(1.0, abs(q)))) for q in (e / s for e, s in zip(ext, self.sizes))
        )

    def strided_dims(self, stride: int) -> tuple[int, int, int]:
        """Voxel counts of the grid downsampled by ``stride`` (ceil division)."""
        return tuple(-(-d // stride) for d in self.dims)

    @classmethod
    def kitti(cls) -> "GridSpec":
        """Front-of-vehicle grid: x [0, 70.4], y [-40, 40], z [-3, 1], 5 cm x 5 cm x 10 cm cells."""
        return cls((0.0, 70.4), (-40.0, 40.0), (-3.0, 1.0), (0.05, 0.05, 0.1))

    @classmethod
    def small(cls) -> "GridSpec":
        """Desk-scale grid for tests and demos (128 x 128 x 20 cells)."""
        return cls((0.0, 19.2), (-9.6, 9.6), (-3.0, 1.0), (0.15, 0.15, 0.2))


def crop_to_range(cloud: PointCloud, spec: GridSpec) -> PointCloud:
    """Keep exactly the points inside the half-open range [min, max) per axis."""
    xyz = cloud.xyz
    mask = np.all((xyz >= spec.mins) & (xyz < spec.maxs), axis=1)
    return PointCloud(xyz[mask], cloud.feat[mask])


def points_to_voxels(xyz: np.ndarray, spec: GridSpec, stride: int = 1) -> np.ndarray:
    """Map points to integer voxel coordinates at the given downsample stride.

    Args:
        xyz: (N, 3) coordinates, all inside the half-open grid range.
        spec: grid geometry.
        stride: positive integer downsample factor.

    Returns:
        (N, 3) int64 coordinates, each within ``spec.strided_dims(stride)``.

    Raises:
        ValueError: if any point lies outside the range.
    """
    pts = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
    inside = np.all((pts >= spec.mins) & (pts < spec.maxs), axis=1)
    if not inside.all():
        bad = int(np.flatnonzero(~inside)[0])
        raise ValueError(f"point {pts[bad].tolist()} at index {bad} is outside the grid range")
    coords = np.floor((pts - spec.mins) / (spec.sizes * stride)).astype(np.int64)
    # guard against float round-up at the far boundary
    np.minimum(coords, np.asarray(spec.strided_dims(stride)) - 1, out=coords)
    return coords


def point_to_voxel(p, spec: GridSpec, stride: int = 1) -> tuple[int, int, int]:
    """Single-point convenience wrapper around :func:`points_to_voxels`."""
    return tuple(points_to_voxels(np.asarray(p).reshape(1, 3), spec, stride)[0])


def voxel_centers(coords: np.ndarray, spec: GridSpec, stride: int = 1) -> np.ndarray:
    """World coordinates of voxel centers for (N, 3) integer coordinates."""
    return spec.mins + (np.asarray(coords, dtype=np.float64) + 0.5) * spec.sizes * stride


def pack_coords(coords: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Pack (i, j, k) into a single int64 key: k * L * W + j * L + i."""
    c = np.asarray(coords, dtype=np.int64)
    L, W, _ = dims
    return c[..., 2] * (L * W) + c[..., 1] * L + c[..., 0]


def unpack_coords(keys: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`pack_coords`; returns (N, 3) int64 coordinates."""
    k = np.asarray(keys, dtype=np.int64)
    L, W, _ = dims
    kz, rem = np.divmod(k, L * W)
    kj, ki = np.divmod(rem, L)
    return np.stack([ki, kj, kz], axis=-1)


class SparseVoxelMap:
    """Associative map from strided voxel coordinates to per-voxel features.

    Occupied voxels are stored as parallel arrays (coords, features, counts)
    plus a packed-key index for O(1) lookups. Instances are treated as
    immutable after construction; queries over them are read-only.
    """

    def __init__(
        self,
        spec: GridSpec,
        stride: int,
        coords: np.ndarray,
        features: np.ndarray,
        counts: np.ndarray | None = None,
    ) -> None:
        if stride < 1:
            raise ValueError(f"stride must be a positive integer, got {stride}")
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ValueError(
                f"features must be (V, F) aligned with coords, got {features.shape} for {coords.shape[0]} voxels"
            )
        dims = spec.strided_dims(stride)
        if len(coords) and (coords.min() < 0 or (coords >= np.asarray(dims)).any()):
            raise ValueError(f"voxel coordinates out of bounds for strided dims {dims}")
        if counts is None:
            counts = np.ones(len(coords), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        keys = pack_coords(coords, dims)
        index = {int(k): i for i, k in enumerate(keys)}
        if len(index) != len(keys):
            raise ValueError("duplicate voxel coordinates")
        self.spec = spec
        self.stride = int(stride)
        self.dims = dims
        self.coords = coords
        self.features = features
        self.counts = counts
        self._index = index

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def row(self, i: int, j: int, k: int) -> int | None:
        """Row index of an occupied voxel, or None."""
        L, W, _ = self.dims
        return self._index.get(k * (L * W) + j * L + i)

    def __contains__(self, coord) -> bool:
        i, j, k = coord
        return self.row(int(i), int(j), int(k)) is not None

    def get(self, i: int, j: int, k: int) -> np.ndarray | None:
        r = self.row(i, j, k)
        return None if r is None else self.features[r]

    def total_points(self) -> int:
        return int(self.counts.sum())


def voxelize_mean(cloud: PointCloud, spec: GridSpec, stride: int = 1) -> SparseVoxelMap:
    """Mean-feature voxelization of an already-cropped cloud.

    Each occupied voxel stores the arithmetic mean of the (xyz + feat) vectors
    of its points and the point count; empty voxels are simply absent. The
    accumulate-then-divide merge makes the result independent of any point
    partitioning.

    Returns:
        SparseVoxelMap with feature dimension 3 + cloud.feat_dim.
    """
    if len(cloud) == 0:
        return SparseVoxelMap(
            spec, stride, np.empty((0, 3), dtype=np.int64),
            np.empty((0, 3 + cloud.feat_dim)), np.empty(0, dtype=np.int64),
        )
    coords = points_to_voxels(cloud.xyz, spec, stride)
    dims = spec.strided_dims(stride)
    keys = pack_coords(coords, dims)
    uniq, inverse = np.unique(keys, return_inverse=True)
    vectors = cloud.point_vectors()
    sums = np.zeros((len(uniq), vectors.shape[1]))
    np.add.at(sums, inverse, vectors)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.int64)
    features = sums / counts[:, None]
    return SparseVoxelMap(spec, stride, unpack_coords(uniq, dims), features, counts)
