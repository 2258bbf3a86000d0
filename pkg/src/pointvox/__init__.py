"""pointvox: point-cloud / sparse-voxel spatial computation toolkit.

Core pieces: oriented-box geometry and rotated IoU, mean-feature voxelization
into sparse voxel maps, semantic-guided keypoint sampling (FPS / score-rectified
FPS / Top-K), Manhattan-distance voxel queries, attention-based neighbor
aggregation with RoI-grid pooling, a 3D detection loss stack, and a seeded
end-to-end pipeline with benchmark tooling.
"""

from .geom import (
    AugmentMode,
    AugmentParams,
    Box3D,
    ObjectClass,
    PointCloud,
    augment,
    bev_rotated_iou,
    box_corners,
    iou3d,
    normalize_yaw,
    point_in_box,
    points_in_box,
)
from .voxelize import (
    GridSpec,
    SparseVoxelMap,
    crop_to_range,
    point_to_voxel,
    points_to_voxels,
    voxel_centers,
    voxelize_mean,
)
from .sampling import (
    MlpScoring,
    MlpWeights,
    OracleScoring,
    SamplingConfig,
    ScoredPoints,
    binary_cross_entropy,
    fps,
    label_foreground,
    mlp_forward,
    mlp_scores,
    oracle_scores,
    sa_layer_forward,
    score_provider,
    seg_loss,
    sfps,
)
from .query import NeighborSet, QueryConfig, ball_query, manhattan_distance, voxel_query
from .aggregate import (
    AttentionWeights,
    BEVFeatureMap,
    ResidualPointNetWeights,
    RoIGridConfig,
    assemble_keypoint_feature,
    attention_forward,
    bev_bilinear_sample,
    bev_from_voxel_map,
    residual_pointnet_forward,
    roi_grid_pool,
)
from .detect import (
    AnchorSpec,
    LossConfig,
    LossParts,
    Proposal,
    assign_roi_targets,
    compose_losses,
    corner_loss,
    focal_loss,
    generate_anchors,
    keypoint_reweight_loss,
    nms,
    sine_error_loss,
    smooth_l1,
)
from .io import Scene, SceneFormatError, generate_scene, read_kitti_bin, read_scene_json
from .pipeline import PipelineConfig, run_pipeline
from .weights import PipelineWeights, load_weights, save_weights

__version__ = "0.1.0"
