"""Detection loss stack, anchor generation, RoI target assignment, and NMS.

Every loss is a pure non-negative function that vanishes at perfect
prediction (up to the shared probability clamp). The composed objective is

    total = seg + rpn + rcnn + key
    rpn   = a1 * cls + a2 * loc + a3 * dir      (a1, a2, a3) = (1.0, 2.0, 0.2)
    rcnn  = cls + loc + corner

with focal loss for first-stage classification, smooth-L1 for box regression,
a sine-error term for angles (blind to heading flips, hence the separate
direction term), and a heading-flip-robust corner loss for refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .geom import Box3D, ObjectClass, box_corners, bev_rotated_iou, iou3d, normalize_yaw
from .sampling import binary_cross_entropy
from .voxelize import GridSpec

EPS = 1e-7  # shared probability clamp for all log-based losses


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and matching thresholds."""

    alpha1: float = 1.0  # rpn classification weight
    alpha2: float = 2.0  # rpn localization weight
    alpha3: float = 0.2  # rpn direction weight
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    fg_iou_threshold: float = 0.55
    roi_sample_count: int = 128

    def __post_init__(self) -> None:
        for name in ("alpha1", "alpha2", "alpha3", "focal_alpha", "smooth_l1_beta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")
        if not 0.0 < self.fg_iou_threshold < 1.0:
            raise ValueError("fg_iou_threshold must lie in (0, 1)")


def focal_loss(p, y, cfg: LossConfig = LossConfig()):
    """Class-imbalance-weighted cross entropy: -a_t (1 - p_t)^gamma ln p_t.

    ``p`` is the predicted foreground probability (clamped to [eps, 1 - eps]),
    ``y`` the binary target. Accepts scalars or arrays.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=np.float64)
    p_t = np.where(y == 1, p, 1.0 - p)
    a_t = np.where(y == 1, cfg.focal_alpha, 1.0 - cfg.focal_alpha)
    out = -a_t * (1.0 - p_t) ** cfg.focal_gamma * np.log(p_t)
    return float(out) if out.ndim == 0 else out


def smooth_l1(x, beta: float = 1.0):
    """Huber-style loss: quadratic inside |x| < beta, linear outside."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)
    return float(out) if out.ndim == 0 else out


def sine_error_loss(theta_p, theta_t, beta: float = 1.0):
    """smooth_l1(sin(theta_p - theta_t)); zero for any heading flip of pi."""
    return smooth_l1(np.sin(np.asarray(theta_p) - np.asarray(theta_t)), beta)


def corner_loss(pred: Box3D, target: Box3D, beta: float = 1.0) -> float:
    """Mean smooth-L1 over the 8 corner distances, robust to heading flips.

    Each predicted corner is compared against the matching corner of both the
    target and the target rotated by pi, taking the smaller distance per
    corner before the smooth-L1.
    """
    pc = box_corners(pred)
    tc = box_corners(target)
    tc_flip = box_corners(target.with_yaw(normalize_yaw(target.yaw + math.pi)))
    d = np.minimum(
        np.linalg.norm(pc - tc, axis=1), np.linalg.norm(pc - tc_flip, axis=1)
    )
    return float(smooth_l1(d, beta).mean())


def direction_loss(probs, target_yaws) -> float:
    """Binary heading-bin cross entropy: bin 1 when the normalized yaw is >= 0."""
    yaws = np.asarray(target_yaws, dtype=np.float64)
    bins = (np.vectorize(normalize_yaw)(yaws) >= 0.0).astype(np.float64)
    return float(binary_cross_entropy(np.asarray(probs, dtype=np.float64), bins, EPS).mean())


def rcnn_cls_loss(probs, ious) -> float:
    """BCE against IoU-derived soft targets: clip((iou - 0.25) / 0.5, 0, 1)."""
    targets = np.clip((np.asarray(ious, dtype=np.float64) - 0.25) / 0.5, 0.0, 1.0)
    return float(binary_cross_entropy(np.asarray(probs, dtype=np.float64), targets, EPS).mean())


def keypoint_reweight_loss(scores, labels, cfg: LossConfig = LossConfig()) -> float:
    """Mean focal loss between keypoint scores and in-box labels; empty -> 0."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape} scores vs {labels.shape} labels")
    if scores.size == 0:
        return 0.0
    return float(np.mean(focal_loss(scores, labels, cfg)))


@dataclass(frozen=True)
class LossParts:
    """Scalar loss components feeding the composed objective."""

    seg: float = 0.0
    rpn_cls: float = 0.0
    rpn_loc: float = 0.0
    rpn_dir: float = 0.0
    rcnn_cls: float = 0.0
    rcnn_loc: float = 0.0
    rcnn_corner: float = 0.0
    key: float = 0.0


class ComposedLosses(NamedTuple):
    rpn: float
    rcnn: float
    total: float


def compose_losses(parts: LossParts, cfg: LossConfig = LossConfig()) -> ComposedLosses:
    """Weighted sums of the stage losses; rejects non-finite components."""
    values = [getattr(parts, f) for f in parts.__dataclass_fields__]
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"non-finite loss component in {parts}")
    rpn = cfg.alpha1 * parts.rpn_cls + cfg.alpha2 * parts.rpn_loc + cfg.alpha3 * parts.rpn_dir
    rcnn = parts.rcnn_cls + parts.rcnn_loc + parts.rcnn_corner
    total = parts.seg + rpn + rcnn + parts.key
    return ComposedLosses(rpn, rcnn, total)


# ---------------------------------------------------------------------------
# Anchors, RoI targets, NMS
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnchorSpec:
    """Per-class mean box sizes and z-centers for the BEV anchor lattice."""

    sizes: Mapping[ObjectClass, tuple[float, float, float]]
    z_centers: Mapping[ObjectClass, float]
    yaws: tuple[float, ...] = (0.0, math.pi / 2)

    def __post_init__(self) -> None:
        for cls_id, (l, w, h) in self.sizes.items():
            if l <= 0 or w <= 0 or h <= 0:
                raise ValueError(f"anchor sizes for {cls_id} must be positive")

    @classmethod
    def kitti(cls) -> "AnchorSpec":
        return cls(
            sizes={
                ObjectClass.CAR: (3.9, 1.6, 1.56),
                ObjectClass.PEDESTRIAN: (0.8, 0.6, 1.73),
                ObjectClass.CYCLIST: (1.76, 0.6, 1.73),
            },
            z_centers={
                ObjectClass.CAR: -1.0,
                ObjectClass.PEDESTRIAN: -0.6,
                ObjectClass.CYCLIST: -0.6,
            },
        )


def generate_anchors(spec: AnchorSpec, grid: GridSpec, stride: int = 8) -> list[Box3D]:
    """One anchor per (class, yaw, BEV cell center).

    Ordering is deterministic: class-major, then yaw, then row-major over the
    (L/stride, W/stride) lattice with the j (y) index fastest. The total count
    is n_classes * n_yaws * L_s * W_s.
    """
    ls, ws, _ = grid.strided_dims(stride)
    sx = grid.voxel_size[0] * stride
    sy = grid.voxel_size[1] * stride
    xs = grid.x_range[0] + (np.arange(ls) + 0.5) * sx
    ys = grid.y_range[0] + (np.arange(ws) + 0.5) * sy
    anchors = []
    for cls_id in sorted(spec.sizes, key=int):
        l, w, h = spec.sizes[cls_id]
        z = spec.z_centers[cls_id]
        for yaw in spec.yaws:
            for x in xs:
                for y in ys:
                    anchors.append(Box3D(float(x), float(y), z, l, w, h, yaw=yaw, class_id=cls_id))
    return anchors


@dataclass(frozen=True)
class Proposal:
    """A scored oriented box."""

    box: Box3D
    score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValueError("proposal score must be finite")


@dataclass(frozen=True, eq=False)
class RoiTargets:
    """Per-proposal assignment plus the balanced training subsample."""

    foreground: np.ndarray  # (P,) bool
    matched_gt: np.ndarray  # (P,) int64, -1 when there is no ground truth
    max_iou: np.ndarray  # (P,) float
    sampled: np.ndarray  # indices into the proposal list, <= roi_sample_count


def assign_roi_targets(
    proposals: Sequence[Proposal],
    gt_boxes: Sequence[Box3D],
    cfg: LossConfig = LossConfig(),
    seed: int = 0,
) -> RoiTargets:
    """Match proposals to ground truth by 3D IoU and draw a balanced sample.

    A proposal is foreground iff its best IoU reaches ``cfg.fg_iou_threshold``.
    Up to ``cfg.roi_sample_count`` proposals are drawn, at most half of them
    foreground; the draw is deterministic for a given seed.
    """
    n = len(proposals)
    if len(gt_boxes) == 0 or n == 0:
        ious = np.zeros((n, max(1, len(gt_boxes))))
        matched = np.full(n, -1, dtype=np.int64)
        max_iou = np.zeros(n)
    else:
        ious = np.array([[iou3d(p.box, g) for g in gt_boxes] for p in proposals])
        matched = ious.argmax(axis=1).astype(np.int64)
        max_iou = ious.max(axis=1)
    fg = max_iou >= cfg.fg_iou_threshold
    matched = np.where(fg, matched, -1)

    rng = np.random.default_rng(seed)
    fg_pool = np.flatnonzero(fg)
    bg_pool = np.flatnonzero(~fg)
    n_fg = min(len(fg_pool), cfg.roi_sample_count // 2)
    take_fg = rng.permutation(fg_pool)[:n_fg]
    n_bg = min(len(bg_pool), cfg.roi_sample_count - n_fg)
    take_bg = rng.permutation(bg_pool)[:n_bg]
    sampled = np.sort(np.concatenate([take_fg, take_bg])).astype(np.int64)
    return RoiTargets(fg, matched, max_iou, sampled)


def nms(proposals: Sequence[Proposal], iou_threshold: float, keep_top: int | None = None) -> np.ndarray:
    """Greedy score-descending suppression under the rotated BEV IoU.

    Returns the indices of kept proposals in score order (lowest index wins
    ties); a candidate is dropped when its IoU with any kept box exceeds the
    threshold. Stops once ``keep_top`` proposals are kept.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    n = len(proposals)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    scores = np.array([p.score for p in proposals])
    order = np.lexsort((np.arange(n), -scores))
    limit = n if keep_top is None else keep_top
    kept: list[int] = []
    for idx in order:
        if len(kept) >= limit:
            break
        box = proposals[idx].box
        if all(bev_rotated_iou(box, proposals[k].box) <= iou_threshold for k in kept):
            kept.append(int(idx))
    return np.asarray(kept, dtype=np.int64)
