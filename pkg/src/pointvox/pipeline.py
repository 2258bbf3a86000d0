"""End-to-end forward pipeline: crop, voxelize, select keypoints, query,
aggregate, propose, refine, suppress.

The pipeline contract is structural rather than accuracy-bearing: proposal
classification scores are stubbed from a keypoint-score histogram (synthetic
weights stand in for the trained backbone) and refined boxes keep their
proposal geometry. Every stage is seeded and deterministic. Given ground-truth
boxes, the full loss stack is evaluated and reported in the diagnostics.

Detections are deliberately free of wall-clock values so the emitted JSON is
bit-identical across runs and thread counts; timings live in the diagnostics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .aggregate import (
    RoIGridConfig,
    assemble_keypoint_feature,
    bev_from_voxel_map,
    roi_grid_pool,
)
from .detect import (
    AnchorSpec,
    LossConfig,
    LossParts,
    Proposal,
    compose_losses,
    corner_loss,
    direction_loss,
    focal_loss,
    generate_anchors,
    keypoint_reweight_loss,
    nms,
    rcnn_cls_loss,
    smooth_l1,
)
from .geom import Box3D, PointCloud, iou3d
from .io import Scene
from .query import voxel_query
from .sampling import (
    SamplingConfig,
    ScoredPoints,
    fps,
    label_foreground,
    mlp_scores,
    sa_layer_forward,
    seg_loss,
)
from .voxelize import GridSpec, crop_to_range, points_to_voxels, voxelize_mean
from .weights import PipelineWeights
from .query import QueryConfig


@dataclass(frozen=True)
class PipelineConfig:
    """Everything the end-to-end pass needs besides the scene and weights."""

    grid: GridSpec = GridSpec.small()
    sampling: SamplingConfig = SamplingConfig()
    query: QueryConfig = QueryConfig()
    roi: RoIGridConfig = RoIGridConfig()
    loss: LossConfig = LossConfig()
    anchors: AnchorSpec = field(default_factory=AnchorSpec.kitti)
    strides: tuple[int, ...] = (1, 2, 4, 8)
    input_sample: int = 16384
    raw_radius: float = 0.8
    pre_nms_top: int = 1024
    proposal_nms_iou: float = 0.7
    proposal_keep: int = 100
    final_nms_iou: float = 0.1
    oracle_scores: bool = False
    seed: int = 0


class _StageClock:
    """Times named stages and relabels failures with the stage name."""

    def __init__(self) -> None:
        self.seconds: dict[str, float] = {}

    def run(self, name, fn):
        start = time.perf_counter()
        try:
            return fn()
        except Exception as exc:
            raise RuntimeError(f"pipeline stage {name!r} failed: {exc}") from exc
        finally:
            self.seconds[name] = time.perf_counter() - start


def _raw_neighbors(keypoint, cloud: PointCloud, radius: float, cap: int) -> np.ndarray:
    """[offset | feat] rows for the closest raw points within ``radius``."""
    delta = cloud.xyz - keypoint
    dist2 = np.einsum("ij,ij->i", delta, delta)
    hit = np.flatnonzero(dist2 <= radius * radius)
    if len(hit) == 0:
        return np.empty((0, 3 + cloud.feat_dim))
    order = hit[np.argsort(dist2[hit], kind="stable")][:cap]
    return np.hstack([delta[order], cloud.feat[order]])


def _anchor_scores(
    anchors: list[Box3D], keypoints: ScoredPoints, grid: GridSpec, stride: int
) -> np.ndarray:
    """Stub proposal scores: normalized keypoint-score mass in each BEV cell."""
    ls, ws, _ = grid.strided_dims(stride)
    hist = np.zeros((ls, ws))
    if len(keypoints):
        cells = points_to_voxels(keypoints.points.xyz, grid, stride)
        np.add.at(hist, (cells[:, 0], cells[:, 1]), keypoints.scores)
    peak = hist.max()
    if peak <= 0:
        return np.zeros(len(anchors))
    sx = grid.voxel_size[0] * stride
    sy = grid.voxel_size[1] * stride
    scores = np.empty(len(anchors))
    for idx, anchor in enumerate(anchors):
        i = min(int((anchor.cx - grid.x_range[0]) / sx), ls - 1)
        j = min(int((anchor.cy - grid.y_range[0]) / sy), ws - 1)
        scores[idx] = hist[i, j] / peak
    return scores


def _box_residuals(pred: Box3D, target: Box3D) -> np.ndarray:
    return np.array(
        [
            pred.cx - target.cx,
            pred.cy - target.cy,
            pred.cz - target.cz,
            pred.l - target.l,
            pred.w - target.w,
            pred.h - target.h,
        ]
    )


def _loss_report(
    detections: list[Proposal],
    scene: Scene,
    seg_layers: list[tuple[np.ndarray, np.ndarray]],
    keypoints: ScoredPoints,
    cfg: PipelineConfig,
) -> dict:
    """Evaluate the loss stack against ground truth (training is out of scope,
    so box regression terms use plain center/size residuals of the stubs)."""
    kp_labels = label_foreground(keypoints.points, scene.gt_boxes)
    seg = seg_loss([s for s, _ in seg_layers], [l for _, l in seg_layers], cfg.sampling)
    key = keypoint_reweight_loss(keypoints.scores, kp_labels, cfg.loss)

    scores = np.array([p.score for p in detections])
    ious = np.zeros(len(detections))
    matched: list[Box3D | None] = [None] * len(detections)
    for i, prop in enumerate(detections):
        for gt in scene.gt_boxes:
            v = iou3d(prop.box, gt)
            if v > ious[i]:
                ious[i], matched[i] = v, gt
    fg = ious >= cfg.loss.fg_iou_threshold
    rpn_cls = float(np.mean(focal_loss(scores, fg.astype(float), cfg.loss))) if len(scores) else 0.0
    rpn_loc = rpn_dir = rcnn_corner = 0.0
    if fg.any():
        fg_idx = np.flatnonzero(fg)
        residuals = np.concatenate(
            [_box_residuals(detections[i].box, matched[i]) for i in fg_idx]
        )
        rpn_loc = float(np.mean(smooth_l1(residuals, cfg.loss.smooth_l1_beta)))
        rpn_dir = direction_loss(scores[fg], [matched[i].yaw for i in fg_idx])
        rcnn_corner = float(
            np.mean(
                [corner_loss(detections[i].box, matched[i], cfg.loss.smooth_l1_beta) for i in fg_idx]
            )
        )
    rcnn_cls = rcnn_cls_loss(scores, ious) if len(scores) else 0.0
    parts = LossParts(
        seg=seg,
        rpn_cls=rpn_cls,
        rpn_loc=rpn_loc,
        rpn_dir=rpn_dir,
        rcnn_cls=rcnn_cls,
        rcnn_loc=rpn_loc,
        rcnn_corner=rcnn_corner,
        key=key,
    )
    composed = compose_losses(parts, cfg.loss)
    return {
        "parts": {k: getattr(parts, k) for k in parts.__dataclass_fields__},
        "rpn": composed.rpn,
        "rcnn": composed.rcnn,
        "total": composed.total,
    }


def _selection_chain(scene, cloud, weights, cfg):
    """Run the staged keypoint selection, collecting score/label pairs."""
    scored = ScoredPoints(cloud, np.zeros(len(cloud)))
    feats = cloud.point_vectors()
    has_gt = bool(scene.gt_boxes)
    seg_layers: list[tuple[np.ndarray, np.ndarray]] = []
    for k in range(1, cfg.sampling.num_layers + 1):
        m = min(cfg.sampling.layer_counts[k - 1], len(scored))
        override = None
        if k > 1:
            if cfg.oracle_scores:
                override = label_foreground(scored.points, scene.gt_boxes).astype(np.float64)
            else:
                override = mlp_scores(feats, weights.sa_seg[k - 1])
            if has_gt:
                labels = label_foreground(scored.points, scene.gt_boxes).astype(np.float64)
                seg_layers.append((override, labels))
        scored, feats = sa_layer_forward(
            scored, feats, k, cfg.sampling, weights.sa_seg[k - 1],
            weights.sa_group[k - 1], count=m, scores_override=override,
        )
    if has_gt:
        # final stage: the selected keypoints' own scores against their labels
        labels = label_foreground(scored.points, scene.gt_boxes).astype(np.float64)
        seg_layers.append((scored.scores, labels))
    return scored, feats, seg_layers


def run_pipeline(
    scene: Scene, weights: PipelineWeights, cfg: PipelineConfig = PipelineConfig()
) -> tuple[list[Proposal], dict]:
    """Run the full forward pass on one scene.

    Returns:
        (detections, diagnostics). Detections are score-ordered proposals
        surviving the final suppression; diagnostics carry per-stage seconds,
        stage counts, assembled-feature statistics, and (when the scene has
        ground truth) the composed loss report.
    """
    clock = _StageClock()
    diag: dict = {"stage_seconds": clock.seconds, "counts": {}, "losses": None}

    cloud = clock.run("crop", lambda: crop_to_range(scene.cloud, cfg.grid))
    diag["counts"]["cropped_points"] = len(cloud)
    if len(cloud) == 0:
        return [], diag

    if len(cloud) > cfg.input_sample:
        keep = clock.run("input_sample", lambda: fps(cloud, cfg.input_sample))
        cloud = cloud.take(keep)

    vmaps = clock.run(
        "voxelize", lambda: [voxelize_mean(cloud, cfg.grid, s) for s in cfg.strides]
    )
    diag["counts"]["voxels_per_stride"] = {
        str(s): len(v) for s, v in zip(cfg.strides, vmaps)
    }
    bev = clock.run("bev", lambda: bev_from_voxel_map(vmaps[-1]))

    keypoints, _, seg_layers = clock.run(
        "sample", lambda: _selection_chain(scene, cloud, weights, cfg)
    )
    diag["counts"]["keypoints"] = len(keypoints)

    neighbor_sets = clock.run(
        "voxel_query",
        lambda: [
            [voxel_query(p, vmap, cfg.query) for p in keypoints.points.xyz]
            for vmap in vmaps
        ],
    )
    diag["counts"]["max_candidates_visited"] = max(
        (ns.visited for sets in neighbor_sets for ns in sets), default=0
    )

    def run_assemble():
        rows = []
        for i, kp in enumerate(keypoints.points.xyz):
            raw = _raw_neighbors(kp, cloud, cfg.raw_radius, cfg.query.max_samples)
            rows.append(
                assemble_keypoint_feature(
                    kp, [sets[i] for sets in neighbor_sets], raw, bev,
                    weights.attention, weights.pointnet,
                )
            )
        return np.asarray(rows)

    kp_features = clock.run("assemble", run_assemble)
    diag["feature_stats"] = {
        "dim": int(kp_features.shape[1]),
        "mean": float(kp_features.mean()),
        "std": float(kp_features.std()),
        "min": float(kp_features.min()),
        "max": float(kp_features.max()),
    }

    def run_proposals():
        anchors = generate_anchors(cfg.anchors, cfg.grid, cfg.strides[-1])
        scores = _anchor_scores(anchors, keypoints, cfg.grid, cfg.strides[-1])
        order = np.lexsort((np.arange(len(anchors)), -scores))[: cfg.pre_nms_top]
        candidates = [Proposal(anchors[i], float(scores[i])) for i in order]
        keep = nms(candidates, cfg.proposal_nms_iou, cfg.proposal_keep)
        return [candidates[i] for i in keep]

    proposals = clock.run("proposals", run_proposals)
    diag["counts"]["proposals"] = len(proposals)

    pooled = clock.run(
        "roi_pool",
        lambda: [
            roi_grid_pool(
                p.box, keypoints.points.xyz, kp_features, cfg.roi,
                weights.roi_group, weights.roi_out,
            )
            for p in proposals
        ],
    )
    if pooled:
        stacked = np.asarray(pooled)
        diag["feature_stats"]["roi_mean"] = float(stacked.mean())
        diag["feature_stats"]["roi_std"] = float(stacked.std())

    detections = clock.run(
        "final_nms", lambda: [proposals[i] for i in nms(proposals, cfg.final_nms_iou)]
    )
    diag["counts"]["detections"] = len(detections)

    if scene.gt_boxes:
        diag["losses"] = clock.run(
            "losses", lambda: _loss_report(detections, scene, seg_layers, keypoints, cfg)
        )
    return detections, diag


def detections_to_dict(scene: Scene, detections: list[Proposal]) -> dict:
    """Deterministic JSON-ready payload for one scene's detections."""
    from .io import box_to_dict

    return {
        "frame_id": scene.frame_id,
        "detections": [
            {**box_to_dict(d.box), "score": d.score} for d in detections
        ],
    }
