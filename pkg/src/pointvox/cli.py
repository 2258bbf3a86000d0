"""Command-line interface.

Subcommands: gen-scenes, voxelize, sample, query-bench, aggregate, nms,
pipeline. A JSON config file (``--config`` flag, or the POINTVOX_CONFIG
environment variable) can override any pipeline parameter; command-line flags
win over the config file. Exit codes: 0 on success, 2 on validation failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .aggregate import RoIGridConfig
from .bench import BenchConfig, measure_scaling, run_benchmark, write_report_csv
from .detect import LossConfig, Proposal, nms as run_nms
from .io import (
    Scene,
    SceneFormatError,
    generate_scene,
    read_kitti_bin,
    read_scene_json,
    scene_from_dict,
    write_scene_json,
)
from .pipeline import PipelineConfig, detections_to_dict, run_pipeline
from .query import QueryConfig
from .sampling import ScoredPoints, SamplingConfig, fps, label_foreground, oracle_scores, sfps
from .voxelize import GridSpec, crop_to_range, voxelize_mean
from .weights import PipelineWeights, WeightFormatError

CONFIG_ENV_VAR = "POINTVOX_CONFIG"

_GRID_PRESETS = {"small": GridSpec.small, "kitti": GridSpec.kitti}


class CliError(ValueError):
    """User-facing validation failure (exit code 2)."""


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

def _build_section(cls, doc: dict, where: str):
    fields = set(cls.__dataclass_fields__)
    unknown = set(doc) - fields
    if unknown:
        raise CliError(f"{where}: unknown config keys {sorted(unknown)}")
    converted = {}
    for key, value in doc.items():
        converted[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**converted)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{where}: {exc}") from exc


def load_pipeline_config(path) -> PipelineConfig:
    """Parse a JSON config file into a PipelineConfig."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config root must be an object")
    known = {"grid", "sampling", "query", "roi", "loss", "pipeline"}
    unknown = set(doc) - known
    if unknown:
        raise CliError(f"{path}: unknown config sections {sorted(unknown)}")
    cfg = PipelineConfig()
    kwargs = {}
    if "grid" in doc:
        grid = doc["grid"]
        if isinstance(grid, str):
            if grid not in _GRID_PRESETS:
                raise CliError(f"{path}: unknown grid preset {grid!r}")
            kwargs["grid"] = _GRID_PRESETS[grid]()
        else:
            kwargs["grid"] = _build_section(GridSpec, grid, f"{path}: grid")
    if "sampling" in doc:
        section = dict(doc["sampling"])
        if "radii" in section:
            section["radii"] = tuple(tuple(r) for r in section["radii"])
        kwargs["sampling"] = _build_section(SamplingConfig, section, f"{path}: sampling")
    if "query" in doc:
        kwargs["query"] = _build_section(QueryConfig, doc["query"], f"{path}: query")
    if "roi" in doc:
        kwargs["roi"] = _build_section(RoIGridConfig, doc["roi"], f"{path}: roi")
    if "loss" in doc:
        kwargs["loss"] = _build_section(LossConfig, doc["loss"], f"{path}: loss")
    if "pipeline" in doc:
        section = doc["pipeline"]
        allowed = set(PipelineConfig.__dataclass_fields__) - {
            "grid", "sampling", "query", "roi", "loss", "anchors"
        }
        unknown = set(section) - allowed
        if unknown:
            raise CliError(f"{path}: pipeline: unknown keys {sorted(unknown)}")
        for key, value in section.items():
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return replace(cfg, **kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from exc


def _resolve_config(args) -> PipelineConfig:
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR)
    cfg = load_pipeline_config(path) if path else PipelineConfig()
    if getattr(args, "grid", None):
        cfg = replace(cfg, grid=_GRID_PRESETS[args.grid]())
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _read_scene(path) -> Scene:
    path = Path(path)
    if not path.exists():
        raise CliError(f"scene file not found: {path}")
    if path.suffix == ".bin":
        return Scene(read_kitti_bin(path), frame_id=path.stem, source=str(path))
    return read_scene_json(path)


def _write_json(path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _load_weights_arg(args, cfg: PipelineConfig) -> PipelineWeights:
    if args.weights:
        return PipelineWeights.load(args.weights, num_layers=cfg.sampling.num_layers)
    return PipelineWeights.synthetic(
        args.synthetic_weights,
        raw_feat_dim=1,
        roi_resolution=cfg.roi.resolution,
        roi_out_dim=cfg.roi.output_dim,
        num_layers=cfg.sampling.num_layers,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        scene = generate_scene(
            args.seed + i,
            spec=cfg.grid,
            n_points=args.points,
            n_boxes=args.boxes,
            fg_fraction=args.fg_fraction,
        )
        path = out_dir / f"scene_{args.seed + i:05d}.json"
        write_scene_json(path, scene)
        print(path)
    return 0


def cmd_voxelize(args) -> int:
    cfg = _resolve_config(args)
    scene = _read_scene(args.scene)
    cloud = crop_to_range(scene.cloud, cfg.grid)
    vmap = voxelize_mean(cloud, cfg.grid, args.stride)
    if args.out:
        import csv

        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["i", "j", "k", "count"] + [f"f{c}" for c in range(vmap.feature_dim)]
            )
            order = np.lexsort((vmap.coords[:, 2], vmap.coords[:, 1], vmap.coords[:, 0]))
            for r in order:
                writer.writerow(
                    [*vmap.coords[r].tolist(), int(vmap.counts[r])]
                    + [repr(float(v)) for v in vmap.features[r]]
                )
        print(args.out)
    else:
        _write_json(
            "-",
            {
                "frame_id": scene.frame_id,
                "stride": args.stride,
                "cropped_points": len(cloud),
                "occupied_voxels": len(vmap),
                "strided_dims": list(vmap.dims),
                "feature_dim": vmap.feature_dim,
            },
        )
    return 0


def _scene_scores(scene: Scene, cloud, sigma: float, seed: int) -> np.ndarray:
    if scene.scores is not None and len(scene.scores) == len(cloud):
        return scene.scores
    if scene.gt_boxes:
        return oracle_scores(label_foreground(cloud, scene.gt_boxes), sigma, seed)
    raise CliError("scene has neither scores nor ground-truth boxes to score from")


def cmd_sample(args) -> int:
    cfg = _resolve_config(args)
    scene = _read_scene(args.scene)
    cloud = crop_to_range(scene.cloud, cfg.grid)
    if len(cloud) == 0:
        raise CliError("no points inside the grid range")
    m = min(args.count, len(cloud))
    if args.method == "fps":
        idx = fps(cloud, m)
    else:
        scores = _scene_scores(scene, cloud, args.sigma, cfg.seed)
        scored = ScoredPoints(cloud, scores)
        mode = "topk" if args.method == "topk" else "sfps"
        idx = sfps(scored, m, gamma=args.gamma, mode=mode)
    labels = label_foreground(cloud, scene.gt_boxes)
    n_fg = int(labels.sum())
    payload = {
        "frame_id": scene.frame_id,
        "method": args.method,
        "gamma": args.gamma,
        "count": m,
        "indices": [int(i) for i in idx],
        "foreground_selected": int(labels[idx].sum()),
        "foreground_total": n_fg,
        "foreground_fraction": float(labels[idx].mean()) if m else 0.0,
    }
    _write_json(args.out, payload)
    return 0


def cmd_query_bench(args) -> int:
    cfg = _resolve_config(args)
    scene_paths: list[Path] = []
    for entry in args.scenes:
        p = Path(entry)
        if p.is_dir():
            scene_paths.extend(sorted(p.glob("*.json")))
        else:
            scene_paths.append(p)
    if not scene_paths and not args.assert_scaling:
        raise CliError("no scenes given")
    if scene_paths:
        scenes = [_read_scene(p) for p in scene_paths]
        bench_cfg = BenchConfig(
            grid=cfg.grid,
            stride=args.stride,
            query=cfg.query,
            keypoints=args.keypoints,
            gammas=tuple(args.gammas),
            repetitions=args.repetitions,
            seed=cfg.seed,
        )
        rows = run_benchmark(scenes, bench_cfg)
        write_report_csv(rows, args.out)
        print(args.out)
    if args.assert_scaling:
        result = measure_scaling(seed=cfg.seed, query=cfg.query)
        _write_json(
            "-",
            {
                "voxel_time_ratio": result.voxel_ratio,
                "ball_time_ratio": result.ball_ratio,
                "small_voxels": result.small_voxels,
                "large_voxels": result.large_voxels,
            },
        )
        if not (result.voxel_ratio < 1.5 and result.ball_ratio >= 1.8):
            print("scaling assertion failed", file=sys.stderr)
            return 1
    return 0


def cmd_aggregate(args) -> int:
    cfg = _resolve_config(args)
    scene = _read_scene(args.scene)
    weights = _load_weights_arg(args, cfg)
    detections, diag = run_pipeline(scene, weights, cfg)
    payload = {
        "frame_id": scene.frame_id,
        "counts": diag["counts"],
        "feature_stats": diag.get("feature_stats"),
    }
    _write_json(args.out, payload)
    return 0


def cmd_nms(args) -> int:
    try:
        doc = json.loads(Path(args.proposals).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CliError(f"proposal file not found: {args.proposals}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{args.proposals}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "proposals" not in doc:
        raise CliError(f"{args.proposals}: expected an object with a 'proposals' list")
    raw = doc["proposals"]
    if not isinstance(raw, list):
        raise CliError(f"{args.proposals}: 'proposals' must be a list")
    proposals = []
    for i, entry in enumerate(raw):
        where = f"{args.proposals}: proposals[{i}]"
        if not isinstance(entry, dict) or "score" not in entry:
            raise CliError(f"{where}: expected an object with a 'score'")
        shim = {
            "points": [],
            "boxes": [{k: v for k, v in entry.items() if k != "score"}],
        }
        scene = scene_from_dict(shim, where=where)
        proposals.append(Proposal(scene.gt_boxes[0], float(entry["score"])))
    keep = run_nms(proposals, args.iou, args.top)
    from .io import box_to_dict

    _write_json(
        args.out,
        {
            "kept_indices": [int(i) for i in keep],
            "kept": [
                {**box_to_dict(proposals[i].box), "score": proposals[i].score}
                for i in keep
            ],
        },
    )
    return 0


def cmd_pipeline(args) -> int:
    cfg = _resolve_config(args)
    if args.oracle_scores:
        cfg = replace(cfg, oracle_scores=True)
    weights = _load_weights_arg(args, cfg)
    scenes = [_read_scene(p) for p in args.scenes]
    for scene in scenes:
        if len(scene.cloud) == 0:
            raise CliError(f"scene {scene.frame_id!r}: cloud is empty")

    def process(scene):
        return run_pipeline(scene, weights, cfg)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(process, scenes))
    else:
        results = [process(s) for s in scenes]

    payload = {
        "scenes": [
            detections_to_dict(scene, dets) for scene, (dets, _) in zip(scenes, results)
        ]
    }
    _write_json(args.out, payload)
    if args.diagnostics:
        _write_json(
            args.diagnostics,
            {
                "scenes": [
                    {"frame_id": scene.frame_id, **diag}
                    for scene, (_, diag) in zip(scenes, results)
                ]
            },
        )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointvox",
        description="Point-cloud / sparse-voxel spatial computation toolkit",
    )
    parser.add_argument("--config", help=f"JSON config file (or set ${CONFIG_ENV_VAR})")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, grid=True, seed=True):
        if grid:
            p.add_argument("--grid", choices=sorted(_GRID_PRESETS), help="grid preset")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("gen-scenes", help="write seeded synthetic scene JSON files")
    add_common(p, seed=False)
    p.set_defaults(func=cmd_gen_scenes)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--boxes", type=int, default=2)
    p.add_argument("--fg-fraction", type=float, default=0.05)

    p = sub.add_parser("voxelize", help="crop and voxelize a scene")
    add_common(p)
    p.set_defaults(func=cmd_voxelize)
    p.add_argument("scene")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", help="per-voxel CSV (default: summary JSON to stdout)")

    p = sub.add_parser("sample", help="select keypoints from a scene")
    add_common(p)
    p.set_defaults(func=cmd_sample)
    p.add_argument("scene")
    p.add_argument("--method", choices=["fps", "sfps", "topk"], default="sfps")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.0, help="oracle score noise")
    p.add_argument("--out", default="-")

    p = sub.add_parser("query-bench", help="benchmark query strategies x samplers")
    add_common(p)
    p.set_defaults(func=cmd_query_bench)
    p.add_argument("scenes", nargs="*", help="scene files or directories")
    p.add_argument("--out", default="bench_report.csv")
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--keypoints", type=int, default=128)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--gammas", type=float, nargs="+", default=[1.0, 2.0, 3.0])
    p.add_argument(
        "--assert-scaling",
        action="store_true",
        help="measure the fixed-density doubling ratios and fail if out of bounds",
    )

    p = sub.add_parser("aggregate", help="assemble keypoint features and report stats")
    add_common(p)
    p.set_defaults(func=cmd_aggregate)
    p.add_argument("scene")
    p.add_argument("--weights", help="weight file")
    p.add_argument("--synthetic-weights", type=int, default=0, metavar="SEED")
    p.add_argument("--out", default="-")

    p = sub.add_parser("nms", help="suppress a JSON proposal list")
    p.set_defaults(func=cmd_nms)
    p.add_argument("proposals")
    p.add_argument("--iou", type=float, default=0.7)
    p.add_argument("--top", type=int, default=None)
    p.add_argument("--out", default="-")

    p = sub.add_parser("pipeline", help="run the end-to-end forward pass")
    add_common(p)
    p.set_defaults(func=cmd_pipeline)
    p.add_argument("scenes", nargs="+")
    p.add_argument("--weights", help="weight file")
    p.add_argument("--synthetic-weights", type=int, default=0, metavar="SEED")
    p.add_argument("--oracle-scores", action="store_true",
                   help="score selection stages from ground-truth boxes")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="detections.json")
    p.add_argument("--diagnostics", help="write per-stage timings and stats here")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, SceneFormatError, WeightFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
