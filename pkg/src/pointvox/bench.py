"""Reproducible kernel benchmarks: query strategies x keypoint samplers.

Timing discipline: a warm-up pass is discarded, each measurement repeats the
full per-keypoint query sweep, and the median of the repetitions is the
headline number (mean and stddev are reported alongside). Rows are sorted
before emission so the report is deterministic apart from the wall-time
columns.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .geom import PointCloud
from .io import Scene
from .query import QueryConfig, ball_query, voxel_query
from .sampling import ScoredPoints, fps, label_foreground, oracle_scores, sfps
from .voxelize import GridSpec, crop_to_range, voxelize_mean

CSV_COLUMNS = (
    "scene_id",
    "n_points",
    "n_voxels",
    "n_keypoints",
    "query_method",
    "sampler",
    "time_median_s",
    "time_mean_s",
    "time_stddev_s",
    "candidates_visited",
    "fg_recall",
)


@dataclass(frozen=True)
class BenchConfig:
    """Benchmark matrix and measurement parameters."""

    grid: GridSpec = GridSpec.small()
    stride: int = 1
    query: QueryConfig = QueryConfig()
    keypoints: int = 128
    gammas: tuple[float, ...] = (1.0, 2.0, 3.0)
    repetitions: int = 10
    score_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.keypoints < 1:
            raise ValueError("keypoints must be >= 1")


@dataclass(frozen=True)
class BenchRow:
    """One (scene, query method, sampler) measurement."""

    scene_id: str
    n_points: int
    n_voxels: int
    n_keypoints: int
    query_method: str
    sampler: str
    time_median_s: float
    time_mean_s: float
    time_stddev_s: float
    candidates_visited: float
    fg_recall: float


_QUERY_FNS = {"ball_query": ball_query, "voxel_query": voxel_query}


def _samplers(cfg: BenchConfig):
    samplers = {"fps": lambda sp, m: fps(sp.points, m)}
    for gamma in cfg.gammas:
        samplers[f"sfps(gamma={gamma:g})"] = (
            lambda sp, m, g=gamma: sfps(sp, m, gamma=g)
        )
    samplers["topk"] = lambda sp, m: sfps(sp, m, mode="topk")
    return samplers


def _time_queries(query_fn, centers, vmap, qcfg, repetitions):
    times = []
    visited = 0
    for rep in range(repetitions + 1):  # first pass is the discarded warm-up
        start = time.perf_counter()
        total_visited = 0
        for center in centers:
            total_visited += query_fn(center, vmap, qcfg).visited
        elapsed = time.perf_counter() - start
        if rep > 0:
            times.append(elapsed)
        visited = total_visited
    return times, visited / len(centers)


def run_benchmark(scenes: list[Scene], cfg: BenchConfig = BenchConfig()) -> list[BenchRow]:
    """Measure every query method against every sampler on every scene.

    Each scene is cropped, oracle-scored from its ground-truth boxes, and
    voxelized once; every sampler picks ``cfg.keypoints`` keypoints (clamped to
    the cloud size) whose foreground recall is recorded; every query method is
    then timed over those keypoints.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    rows: list[BenchRow] = []
    for scene in scenes:
        cloud = crop_to_range(scene.cloud, cfg.grid)
        if len(cloud) == 0:
            continue
        labels = label_foreground(cloud, scene.gt_boxes)
        scores = oracle_scores(labels, cfg.score_sigma, cfg.seed)
        scored = ScoredPoints(cloud, scores)
        vmap = voxelize_mean(cloud, cfg.grid, cfg.stride)
        n_fg = max(1, int(labels.sum()))
        m = min(cfg.keypoints, len(cloud))
        for sampler_name, sampler in _samplers(cfg).items():
            idx = sampler(scored, m)
            recall = float(labels[idx].sum() / n_fg)
            centers = cloud.xyz[idx]
            for method, query_fn in _QUERY_FNS.items():
                times, visited = _time_queries(
                    query_fn, centers, vmap, cfg.query, cfg.repetitions
                )
                rows.append(
                    BenchRow(
                        scene_id=scene.frame_id,
                        n_points=len(cloud),
                        n_voxels=len(vmap),
                        n_keypoints=m,
                        query_method=method,
                        sampler=sampler_name,
                        time_median_s=statistics.median(times),
                        time_mean_s=statistics.fmean(times),
                        time_stddev_s=statistics.pstdev(times),
                        candidates_visited=visited,
                        fg_recall=recall,
                    )
                )
    rows.sort(key=lambda r: (r.scene_id, r.query_method, r.sampler))
    return rows


def write_report_csv(rows: list[BenchRow], path) -> None:
    """Emit the benchmark report as RFC-4180 CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([getattr(row, col) for col in CSV_COLUMNS])


@dataclass(frozen=True)
class ScalingResult:
    """Query-time ratios when the scene size doubles at fixed point density."""

    voxel_ratio: float
    ball_ratio: float
    small_voxels: int
    large_voxels: int
    voxel_visited_small: float
    voxel_visited_large: float


def measure_scaling(
    seed: int = 0,
    base_points: int = 40000,
    keypoints: int = 24,
    repetitions: int = 12,
    query: QueryConfig | None = None,
) -> ScalingResult:
    """Time both query strategies on a scene and on its density-preserving double.

    The large scene doubles the x extent and the point count, so occupancy
    doubles while local density is unchanged. Keypoints are drawn in the shared
    half so both runs issue identical queries.
    """
    rng = np.random.default_rng(seed)
    small_grid = GridSpec((0.0, 19.2), (-9.6, 9.6), (-3.0, 1.0), (0.15, 0.15, 0.2))
    large_grid = GridSpec((0.0, 38.4), (-9.6, 9.6), (-3.0, 1.0), (0.15, 0.15, 0.2))
    qcfg = query if query is not None else QueryConfig(ball_radius=1.0)

    def uniform_cloud(grid, n):
        lo, hi = grid.mins, grid.maxs
        return PointCloud(rng.uniform(lo + 1e-3, hi - 1e-3, size=(n, 3)))

    small_map = voxelize_mean(uniform_cloud(small_grid, base_points), small_grid)
    large_map = voxelize_mean(uniform_cloud(large_grid, 2 * base_points), large_grid)
    centers = rng.uniform(
        small_grid.mins + 1.0, small_grid.maxs - 1.0, size=(keypoints, 3)
    )

    def median_time(query_fn, vmap):
        times, visited = _time_queries(query_fn, centers, vmap, qcfg, repetitions)
        return statistics.median(times), visited

    ball_small, _ = median_time(ball_query, small_map)
    ball_large, _ = median_time(ball_query, large_map)
    voxel_small, visited_small = median_time(voxel_query, small_map)
    voxel_large, visited_large = median_time(voxel_query, large_map)
    return ScalingResult(
        voxel_ratio=voxel_large / voxel_small,
        ball_ratio=ball_large / ball_small,
        small_voxels=len(small_map),
        large_voxels=len(large_map),
        voxel_visited_small=visited_small,
        voxel_visited_large=visited_large,
    )
