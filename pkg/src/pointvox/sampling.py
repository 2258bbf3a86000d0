"""Foreground labeling, score providers, FPS / score-rectified FPS / Top-K
selection, the staged segmentation loss, and the set-abstraction layer forward.

The score-rectified sampler keeps the greedy max-min flow of furthest point
sampling but multiplies each round's running min-distances by
``exp(gamma * score) - 1`` before taking the argmax, which biases selection
toward high-score (foreground) points. With constant positive scores the
multiplier cancels and the selection reduces to plain FPS; as gamma grows the
ordering approaches a pure Top-K on scores.

Tie-breaking everywhere is "lowest index wins". When a round's rectified
distances are all zero (every unselected score is 0), the plain distance
decides that round instead, so selection never degenerates to index order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Box3D, PointCloud, points_in_box

SCORE_EPS = 1e-7  # clamp for log-based losses


@dataclass(frozen=True, eq=False)
class ScoredPoints:
    """A point cloud paired with per-point foreground scores in [0, 1]."""

    points: PointCloud
    scores: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(scores) != len(self.points):
            raise ValueError(f"{len(scores)} scores for {len(self.points)} points")
        if len(scores) and (scores.min() < 0.0 or scores.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.points)

    def take(self, indices: np.ndarray) -> "ScoredPoints":
        idx = np.asarray(indices)
        return ScoredPoints(self.points.take(idx), self.scores[idx])


@dataclass(frozen=True)
class SamplingConfig:
    """Keypoint-sampling hyperparameters for the four-stage selection chain."""

    gamma: float = 1.0
    layer_counts: tuple[int, ...] = (4096, 2048, 1024, 256)
    input_size: int = 16384
    layer_weights: tuple[float, ...] = (0.1, 0.01, 0.001, 0.0001)
    radii: tuple[tuple[float, float], ...] = ((0.1, 0.5), (0.5, 1.0), (1.0, 2.0), (2.0, 4.0))

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if any(a <= b for a, b in zip(self.layer_counts, self.layer_counts[1:])):
            raise ValueError("layer counts must be strictly decreasing")
        if any(w <= 0 for w in self.layer_weights):
            raise ValueError("layer loss weights must be positive")

    @property
    def num_layers(self) -> int:
        return len(self.layer_counts)


@dataclass(frozen=True)
class MlpWeights:
    """Weights of a small multi-layer perceptron: per layer a (out, in) matrix and bias.

    ReLU is applied between layers and never after the last one; any output
    squashing (e.g. the sigmoid of the score head) belongs to the caller.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self) -> None:
        layers = tuple(
            (np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
            for w, b in self.layers
        )
        prev = None
        for li, (w, b) in enumerate(layers):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ValueError(f"layer {li}: weight {w.shape} and bias {b.shape} inconsistent")
            if prev is not None and w.shape[1] != prev:
                raise ValueError(f"layer {li}: input dim {w.shape[1]} != previous output {prev}")
            prev = w.shape[0]
        object.__setattr__(self, "layers", layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @classmethod
    def random(cls, dims: tuple[int, ...], rng: np.random.Generator) -> "MlpWeights":
        """He-style random init along a chain of layer widths, float32-valued."""
        layers = []
        for d_in, d_out in zip(dims, dims[1:]):
            scale = math.sqrt(2.0 / d_in)
            w = (rng.standard_normal((d_out, d_in)) * scale).astype(np.float32).astype(np.float64)
            b = np.zeros(d_out)
            layers.append((w, b))
        return cls(tuple(layers))


def mlp_forward(x: np.ndarray, weights: MlpWeights) -> np.ndarray:
    """Apply the perceptron to (N, D) rows (or a single (D,) vector)."""
    h = np.asarray(x, dtype=np.float64)
    single = h.ndim == 1
    if single:
        h = h[None, :]
    if h.shape[1] != weights.in_dim:
        raise ValueError(f"feature dim {h.shape[1]} does not match weights ({weights.in_dim})")
    last = len(weights.layers) - 1
    for li, (w, b) in enumerate(weights.layers):
        h = h @ w.T + b
        if li != last:
            np.maximum(h, 0.0, out=h)
    return h[0] if single else h


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def label_foreground(cloud: PointCloud, boxes: list[Box3D]) -> np.ndarray:
    """Per-point binary labels: 1 iff the point lies inside any box."""
    labels = np.zeros(len(cloud), dtype=np.int8)
    for box in boxes:
        labels |= points_in_box(cloud.xyz, box).astype(np.int8)
    return labels


@dataclass(frozen=True)
class OracleScoring:
    """Ground-truth labels perturbed by clamped Gaussian noise of scale sigma."""

    labels: np.ndarray
    sigma: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class MlpScoring:
    """Sigmoid of a small perceptron evaluated on [xyz | feat] point vectors."""

    weights: MlpWeights


def oracle_scores(labels: np.ndarray, sigma: float = 0.0, seed: int = 0) -> np.ndarray:
    scores = np.asarray(labels, dtype=np.float64).copy()
    if sigma > 0.0:
        rng = np.random.default_rng(seed)
        scores += rng.normal(0.0, sigma, size=scores.shape)
    return np.clip(scores, 0.0, 1.0)


def mlp_scores(features: np.ndarray, weights: MlpWeights) -> np.ndarray:
    """Per-point score: sigmoid of the perceptron's scalar output."""
    out = mlp_forward(features, weights)
    if out.ndim != 2 or out.shape[1] != 1:
        raise ValueError(f"score weights must end in a scalar, got output dim {out.shape}")
    return sigmoid(out[:, 0])


def score_provider(cloud: PointCloud, mode: OracleScoring | MlpScoring) -> ScoredPoints:
    """Attach foreground scores to a cloud, from labels or from a score head."""
    if isinstance(mode, OracleScoring):
        scores = oracle_scores(mode.labels, mode.sigma, mode.seed)
        if len(scores) != len(cloud):
            raise ValueError(f"{len(scores)} labels for {len(cloud)} points")
    else:
        scores = mlp_scores(cloud.point_vectors(), mode.weights)
    return ScoredPoints(cloud, scores)


def _as_xyz(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.xyz
    return np.asarray(points, dtype=np.float64)


def fps(points, m: int) -> np.ndarray:
    """Greedy max-min (furthest point) sampling seeded at index 0.

    Args:
        points: PointCloud or (N, 3) array.
        m: number of samples, 1 <= m <= N.

    Returns:
        (m,) int64 indices in selection order; always distinct. Argmax ties go
        to the lowest index.
    """
    xyz = _as_xyz(points)
    n = len(xyz)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} of {n} points")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = 0
    dists = np.linalg.norm(xyz - xyz[0], axis=1)
    dists[0] = -np.inf  # never re-pick
    for i in range(1, m):
        nxt = int(np.argmax(dists))
        selected[i] = nxt
        np.minimum(dists, np.linalg.norm(xyz - xyz[nxt], axis=1), out=dists)
        dists[nxt] = -np.inf
    return selected


def sfps(scored: ScoredPoints, m: int, gamma: float = 1.0, mode: str = "sfps") -> np.ndarray:
    """Score-guided keypoint selection.

    ``mode="sfps"`` runs the rectified-distance loop: the first pick is the
    score argmax; every later round recomputes ``(exp(gamma * s) - 1) * d``
    over unselected points, picks the argmax, then relaxes the running
    min-distances. ``mode="topk"`` simply returns the m highest-score indices.
    Both are deterministic with lowest-index tie-breaking.
    """
    if mode not in ("sfps", "topk"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    xyz = scored.points.xyz
    scores = scored.scores
    n = len(xyz)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} of {n} points")
    if mode == "topk":
        return np.argsort(-scores, kind="stable")[:m].astype(np.int64)

    multiplier = np.expm1(gamma * scores)
    selected = np.empty(m, dtype=np.int64)
    first = int(np.argmax(scores))
    selected[0] = first
    unpicked = np.ones(n, dtype=bool)
    unpicked[first] = False
    dists = np.linalg.norm(xyz - xyz[first], axis=1)
    for i in range(1, m):
        rectified = np.where(unpicked, multiplier * dists, -np.inf)
        nxt = int(np.argmax(rectified))
        if rectified[nxt] <= 0.0:
            # every unselected score is zero: fall back to plain distance
            nxt = int(np.argmax(np.where(unpicked, dists, -np.inf)))
        selected[i] = nxt
        unpicked[nxt] = False
        np.minimum(dists, np.linalg.norm(xyz - xyz[nxt], axis=1), out=dists)
    return selected


def binary_cross_entropy(scores: np.ndarray, labels: np.ndarray, eps: float = SCORE_EPS) -> np.ndarray:
    """Elementwise BCE with scores clamped to [eps, 1 - eps]."""
    s = np.clip(np.asarray(scores, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return -(y * np.log(s) + (1.0 - y) * np.log(1.0 - s))


def seg_loss(scores_per_layer, labels_per_layer, config: SamplingConfig = SamplingConfig()) -> float:
    """Staged segmentation loss: sum over layers of (weight / N_k) * sum of BCE."""
    if len(scores_per_layer) != len(labels_per_layer):
        raise ValueError("scores and labels must have the same number of layers")
    if len(scores_per_layer) > len(config.layer_weights):
        raise ValueError(
            f"{len(scores_per_layer)} layers but only {len(config.layer_weights)} loss weights"
        )
    total = 0.0
    for k, (scores, labels) in enumerate(zip(scores_per_layer, labels_per_layer)):
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        if scores.shape != labels.shape:
            raise ValueError(f"layer {k}: scores {scores.shape} vs labels {labels.shape}")
        if scores.size == 0:
            continue
        total += config.layer_weights[k] / scores.size * float(
            binary_cross_entropy(scores, labels).sum()
        )
    return total


def group_and_pool(
    keypoint_xyz: np.ndarray,
    source_xyz: np.ndarray,
    source_features: np.ndarray,
    radius: float,
    weights: MlpWeights,
) -> np.ndarray:
    """Group source points within ``radius`` of each keypoint, transform, max-pool.

    Each neighbor contributes [feature | (neighbor - keypoint)]; the shared
    perceptron maps that to ``weights.out_dim`` channels and the group is
    reduced by an elementwise max. Empty groups contribute a zero vector.

    Returns:
        (M, weights.out_dim) pooled features.
    """
    m = len(keypoint_xyz)
    out = np.zeros((m, weights.out_dim))
    for i in range(m):
        delta = source_xyz - keypoint_xyz[i]
        mask = np.einsum("ij,ij->i", delta, delta) <= radius * radius
        if not mask.any():
            continue
        grouped = np.hstack([source_features[mask], delta[mask]])
        out[i] = mlp_forward(grouped, weights).max(axis=0)
    return out


def sa_layer_forward(
    scored: ScoredPoints,
    features: np.ndarray,
    layer_index: int,
    config: SamplingConfig,
    seg_mlp: MlpWeights | None,
    group_mlp: MlpWeights,
    count: int | None = None,
    scores_override: np.ndarray | None = None,
) -> tuple[ScoredPoints, np.ndarray]:
    """One set-abstraction stage: score (layers 2+), select, group, pool.

    Layer 1 uses plain FPS and passes the input scores through; layers 2-4
    re-score ``features`` with ``seg_mlp`` and select with the rectified
    sampler. For every selected keypoint, neighbors within each of the layer's
    two radii are grouped with relative offsets appended, pushed through the
    shared ``group_mlp``, max-pooled per radius, and the two pooled vectors
    concatenated.

    Args:
        scored: the layer's input points with their current scores.
        features: (N, D) per-point features fed to the score head and grouping.
        layer_index: 1-based stage index.
        config: counts, gamma, and radii per stage.
        seg_mlp: score head weights; required for layers 2+ unless
            ``scores_override`` is given.
        group_mlp: shared per-point perceptron; input dim must be D + 3.
        count: optional override of the stage's keypoint count.
        scores_override: precomputed per-point scores (e.g. oracle labels)
            used instead of the score head for layers 2+.

    Returns:
        (selected ScoredPoints, (M, 2 * group_mlp.out_dim) aggregated features).
    """
    if not 1 <= layer_index <= config.num_layers:
        raise ValueError(f"layer_index must be in 1..{config.num_layers}")
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != len(scored):
        raise ValueError(f"{features.shape[0]} feature rows for {len(scored)} points")
    m = config.layer_counts[layer_index - 1] if count is None else count
    if layer_index == 1:
        idx = fps(scored.points, m)
        out_scores = scored.scores[idx]
    else:
        if scores_override is not None:
            scores = np.asarray(scores_override, dtype=np.float64)
        elif seg_mlp is not None:
            scores = mlp_scores(features, seg_mlp)
        else:
            raise ValueError("layers 2+ need segmentation weights or explicit scores")
        idx = sfps(ScoredPoints(scored.points, scores), m, config.gamma)
        out_scores = scores[idx]
    xyz = scored.points.xyz
    kp_xyz = xyz[idx]
    r_small, r_large = config.radii[layer_index - 1]
    pooled = [
        group_and_pool(kp_xyz, xyz, features, r, group_mlp) for r in (r_small, r_large)
    ]
    return ScoredPoints(scored.points.take(idx), out_scores), np.hstack(pooled)
