"""Voxel self-attention, residual PointNet aggregation, BEV sampling,
keypoint feature assembly, and RoI-grid pooling.

Attention here is a single head over one keypoint's neighbor set: queries,
keys, and values are linear projections of the input features; per-query
weights are a softmax of dot-product similarities scaled by sqrt(d_k); the
weighted value sum is concatenated with the original feature. Softmax
denominators and the weighted sums are reduced with exactly-rounded summation
(math.fsum), which makes the forward pass bitwise permutation-equivariant.

Normalization layers use stored statistics only (inference mode), so every
forward pass is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import Box3D, rotation_z
from .query import NeighborSet
from .sampling import MlpWeights, mlp_forward
from .voxelize import GridSpec, SparseVoxelMap


@dataclass(frozen=True)
class AttentionWeights:
    """Projection matrices for single-head dot-product attention.

    w_q, w_k: (d_k, d_f); w_v: (d_v, d_f).
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self) -> None:
        w_q = np.asarray(self.w_q, dtype=np.float64)
        w_k = np.asarray(self.w_k, dtype=np.float64)
        w_v = np.asarray(self.w_v, dtype=np.float64)
        if w_q.ndim != 2 or w_q.shape != w_k.shape:
            raise ValueError(f"w_q {w_q.shape} and w_k {w_k.shape} must match")
        if w_v.ndim != 2 or w_v.shape[1] != w_q.shape[1]:
            raise ValueError(f"w_v input dim {w_v.shape} must match w_q {w_q.shape}")
        if w_q.shape[0] < 1:
            raise ValueError("key dimension must be positive")
        for name, w in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v)):
            object.__setattr__(self, name, w)

    @property
    def feat_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def key_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def value_dim(self) -> int:
        return self.w_v.shape[0]

    @property
    def out_dim(self) -> int:
        return self.value_dim + self.feat_dim

    @classmethod
    def random(cls, d_f: int, d_k: int, d_v: int, rng: np.random.Generator) -> "AttentionWeights":
        def mat(rows, cols):
            return (rng.standard_normal((rows, cols)) / math.sqrt(cols)).astype(
                np.float32
            ).astype(np.float64)

        return cls(mat(d_k, d_f), mat(d_k, d_f), mat(d_v, d_f))


def _fsum_rows(terms: np.ndarray) -> np.ndarray:
    """Exactly-rounded row sums; order-independent by construction."""
    return np.array([math.fsum(row) for row in terms])


def attention_weights_matrix(feats: np.ndarray, w: AttentionWeights) -> np.ndarray:
    """(N, N) softmax attention weights; row i holds query i's distribution."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != w.feat_dim:
        raise ValueError(f"features {feats.shape} do not match projection dim {w.feat_dim}")
    if feats.shape[0] < 1:
        raise ValueError("attention needs at least one input")
    q = feats @ w.w_q.T
    k = feats @ w.w_k.T
    logits = (q @ k.T) / math.sqrt(w.key_dim)
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / _fsum_rows(shifted)[:, None]


def attention_forward(feats: np.ndarray, w: AttentionWeights) -> np.ndarray:
    """Self-attention over N feature vectors.

    Args:
        feats: (N, d_f) input features, N >= 1.
        w: projection weights.

    Returns:
        (N, d_v + d_f) array: each row is the attention-weighted value sum
        concatenated with the original feature.
    """
    feats = np.asarray(feats, dtype=np.float64)
    s = attention_weights_matrix(feats, w)
    v = feats @ w.w_v.T
    n, d_v = v.shape
    vhat = np.empty((n, d_v))
    for c in range(d_v):
        vhat[:, c] = _fsum_rows(s * v[:, c])
    return np.hstack([vhat, feats])


@dataclass(frozen=True)
class NormParams:
    """Per-channel affine normalization with precomputed statistics."""

    scale: np.ndarray
    shift: np.ndarray
    mean: np.ndarray
    var: np.ndarray


@dataclass(frozen=True)
class ResidualBlock:
    """Per-point linear map followed by normalization and ReLU."""

    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    norm: NormParams


@dataclass(frozen=True)
class ResidualPointNetWeights:
    """A stack of linear+norm+ReLU blocks with skip additions and a final max-pool.

    Block outputs are added to their inputs wherever the dimensions match.
    ``eps`` stabilizes the normalization denominator.
    """

    blocks: tuple[ResidualBlock, ...]
    eps: float = 1e-5

    def __post_init__(self) -> None:
        prev = None
        for i, blk in enumerate(self.blocks):
            out_dim, in_dim = blk.weight.shape
            if prev is not None and in_dim != prev:
                raise ValueError(f"block {i}: input dim {in_dim} != previous output {prev}")
            for arr in (blk.bias, blk.norm.scale, blk.norm.shift, blk.norm.mean, blk.norm.var):
                if arr.shape != (out_dim,):
                    raise ValueError(f"block {i}: per-channel params must have shape ({out_dim},)")
            prev = out_dim

    @property
    def in_dim(self) -> int:
        return self.blocks[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.blocks[-1].weight.shape[0]

    @classmethod
    def identity(cls, dim: int, n_blocks: int = 1, eps: float = 0.0) -> "ResidualPointNetWeights":
        """Unit-scale, zero-shift blocks with identity linear maps (for tests/smoke)."""
        blocks = tuple(
            ResidualBlock(
                np.eye(dim),
                np.zeros(dim),
                NormParams(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim)),
            )
            for _ in range(n_blocks)
        )
        return cls(blocks, eps=eps)

    @classmethod
    def random(cls, dims: tuple[int, ...], rng: np.random.Generator) -> "ResidualPointNetWeights":
        blocks = []
        for d_in, d_out in zip(dims, dims[1:]):
            w = (rng.standard_normal((d_out, d_in)) / math.sqrt(d_in)).astype(
                np.float32
            ).astype(np.float64)
            blocks.append(
                ResidualBlock(
                    w,
                    np.zeros(d_out),
                    NormParams(np.ones(d_out), np.zeros(d_out), np.zeros(d_out), np.ones(d_out)),
                )
            )
        return cls(tuple(blocks))


def residual_pointnet_forward(vectors: np.ndarray, w: ResidualPointNetWeights) -> np.ndarray:
    """Aggregate N vectors into one through the residual block stack and a max-pool.

    Each block applies linear -> normalize (stored statistics) -> ReLU and is
    skip-added to its input when the dimensions agree; the block stack is
    applied per point and the result reduced by an elementwise max over the N
    points.
    """
    h = np.asarray(vectors, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"expected (N, C) inputs, got shape {h.shape}")
    if h.shape[0] < 1:
        raise ValueError("aggregation needs at least one vector")
    for blk in w.blocks:
        if h.shape[1] != blk.weight.shape[1]:
            raise ValueError(
                f"input dim {h.shape[1]} does not match block input {blk.weight.shape[1]}"
            )
        y = h @ blk.weight.T + blk.bias
        y = (y - blk.norm.mean) / np.sqrt(blk.norm.var + w.eps) * blk.norm.scale + blk.norm.shift
        np.maximum(y, 0.0, out=y)
        h = y + h if y.shape[1] == h.shape[1] else y
    return h.max(axis=0)


@dataclass(frozen=True, eq=False)
class BEVFeatureMap:
    """Dense top-down feature grid with its world-to-grid transform.

    ``features`` has shape (L_s, W_s, C) where L_s x W_s are the grid's
    strided x/y dims; cell (i, j) is centered at
    ``min + (index + 0.5) * voxel_size * stride``.
    """

    spec: GridSpec
    stride: int
    features: np.ndarray

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        ls, ws, _ = self.spec.strided_dims(self.stride)
        if feats.ndim != 3 or feats.shape[:2] != (ls, ws):
            raise ValueError(f"features must be ({ls}, {ws}, C), got {feats.shape}")
        if not np.isfinite(feats).all():
            raise ValueError("BEV features must be finite")
        object.__setattr__(self, "features", feats)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]


def bev_from_voxel_map(vmap: SparseVoxelMap) -> BEVFeatureMap:
    """Compress a sparse voxel map to a dense BEV grid by averaging over z."""
    ls, ws, _ = vmap.dims
    grid = np.zeros((ls, ws, vmap.feature_dim))
    counts = np.zeros((ls, ws), dtype=np.int64)
    np.add.at(grid, (vmap.coords[:, 0], vmap.coords[:, 1]), vmap.features)
    np.add.at(counts, (vmap.coords[:, 0], vmap.coords[:, 1]), 1)
    occupied = counts > 0
    grid[occupied] /= counts[occupied][:, None]
    return BEVFeatureMap(vmap.spec, vmap.stride, grid)


def bev_bilinear_sample(bev: BEVFeatureMap, x: float, y: float) -> np.ndarray:
    """Bilinear interpolation of the four surrounding cell centers.

    Cells outside the grid contribute zero. (x, y) must lie within the grid's
    world range.
    """
    spec = bev.spec
    if not (spec.x_range[0] <= x < spec.x_range[1] and spec.y_range[0] <= y < spec.y_range[1]):
        raise ValueError(f"({x}, {y}) outside BEV range")
    sx = spec.voxel_size[0] * bev.stride
    sy = spec.voxel_size[1] * bev.stride
    u = (x - spec.x_range[0]) / sx - 0.5
    v = (y - spec.y_range[0]) / sy - 0.5
    i0, j0 = math.floor(u), math.floor(v)
    tu, tv = u - i0, v - j0
    ls, ws, c = bev.features.shape
    out = np.zeros(c)
    for di, wu in ((0, 1.0 - tu), (1, tu)):
        for dj, wv in ((0, 1.0 - tv), (1, tv)):
            i, j = i0 + di, j0 + dj
            wgt = wu * wv
            if wgt != 0.0 and 0 <= i < ls and 0 <= j < ws:
                out += wgt * bev.features[i, j]
    return out


def aggregate_neighbors(
    features: np.ndarray, attn: AttentionWeights, rpn_w: ResidualPointNetWeights
) -> np.ndarray:
    """Attention then residual-PointNet over one neighbor group; empty -> zeros."""
    if len(features) == 0:
        return np.zeros(rpn_w.out_dim)
    return residual_pointnet_forward(attention_forward(features, attn), rpn_w)


def assemble_keypoint_feature(
    keypoint: np.ndarray,
    stride_neighbors: list[NeighborSet],
    raw_neighbors: np.ndarray,
    bev: BEVFeatureMap,
    attn: AttentionWeights,
    rpn_w: ResidualPointNetWeights,
) -> np.ndarray:
    """Concatenate per-stride voxel aggregates, the raw-point aggregate, and a BEV sample.

    Every branch runs attention followed by the residual PointNet; branches
    with no neighbors contribute zero vectors. Concatenation order is fixed:
    strides in the given order (coarse to fine as supplied), then raw points,
    then the BEV sample at the keypoint's (x, y).
    """
    parts = [aggregate_neighbors(ns.features, attn, rpn_w) for ns in stride_neighbors]
    parts.append(aggregate_neighbors(np.asarray(raw_neighbors, dtype=np.float64), attn, rpn_w))
    parts.append(bev_bilinear_sample(bev, float(keypoint[0]), float(keypoint[1])))
    return np.concatenate(parts)


@dataclass(frozen=True)
class RoIGridConfig:
    """RoI-grid pooling layout: lattice resolution, pooling radii, output width."""

    resolution: int = 6
    radii: tuple[float, float] = (0.6, 0.8)
    output_dim: int = 256

    def __post_init__(self) -> None:
        if self.resolution < 1:
            raise ValueError("resolution must be positive")
        if any(r <= 0 for r in self.radii):
            raise ValueError("pooling radii must be positive")

    @property
    def num_grid_points(self) -> int:
        return self.resolution**3


def roi_grid_points(box: Box3D, resolution: int = 6) -> np.ndarray:
    """Cell centers of the box's resolution^3 uniform subdivision, in world frame.

    Ordering is lexicographic in the box-frame cell index (ix, iy, iz) with iz
    fastest.
    """
    steps = (np.arange(resolution) + 0.5) / resolution - 0.5
    gx, gy, gz = np.meshgrid(steps * box.l, steps * box.w, steps * box.h, indexing="ij")
    local = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    return local @ rotation_z(box.yaw).T + box.center


def roi_grid_pool(
    proposal: Box3D,
    keypoints_xyz: np.ndarray,
    keypoint_features: np.ndarray,
    cfg: RoIGridConfig,
    group_mlp: MlpWeights,
    out_mlp: MlpWeights,
) -> np.ndarray:
    """Pool keypoint features onto a proposal's grid and vectorize.

    For every grid point and every pooling radius, keypoints strictly inside
    the radius contribute [feature | relative offset]; offsets are expressed in
    the proposal's canonical (yaw-aligned) frame so the result is invariant
    under rigid motion applied jointly to the proposal and the keypoints. The
    shared ``group_mlp`` transforms each contribution, groups are max-pooled,
    radii and grid points concatenated, and ``out_mlp`` maps the whole thing to
    ``cfg.output_dim`` values. Empty groups contribute zeros.
    """
    kp = np.asarray(keypoints_xyz, dtype=np.float64).reshape(-1, 3)
    feats = np.asarray(keypoint_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != kp.shape[0]:
        raise ValueError(f"{feats.shape} features for {kp.shape[0]} keypoints")
    if out_mlp.out_dim != cfg.output_dim:
        raise ValueError(f"out_mlp produces {out_mlp.out_dim}, config wants {cfg.output_dim}")
    grid = roi_grid_points(proposal, cfg.resolution)
    to_canonical = rotation_z(-proposal.yaw)
    d_g = group_mlp.out_dim
    per_grid = np.zeros((len(grid), len(cfg.radii), d_g))
    if len(kp):
        for gi, g in enumerate(grid):
            delta = kp - g
            dist = np.linalg.norm(delta, axis=1)
            canonical = delta @ to_canonical.T
            for ri, radius in enumerate(cfg.radii):
                mask = dist < radius
                if not mask.any():
                    continue
                grouped = np.hstack([feats[mask], canonical[mask]])
                per_grid[gi, ri] = mlp_forward(grouped, group_mlp).max(axis=0)
    return mlp_forward(per_grid.reshape(-1), out_mlp)
