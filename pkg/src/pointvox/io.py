"""Scene ingestion and emission: KITTI-style binary clouds, a portable JSON
scene format, and a seeded synthetic scene generator.

The JSON scene schema::

    {
      "frame_id": "0001",            // optional, defaults to ""
      "source": "synthetic",         // optional, defaults to ""
      "points": [[x, y, z, f0, ...], ...],   // uniform row length >= 3
      "boxes":  [{"center": [x, y, z], "size": [l, w, h],
                  "yaw": 0.0, "class": "Car"}, ...],
      "scores": [s0, s1, ...]        // optional, one per point, in [0, 1]
    }

Readers reject malformed input with errors naming the offending JSON path;
there are no partial silent parses. Yaw values outside [-pi, pi) are
normalized on load with a warning. Writers are exact inverses of the readers
for float64 JSON payloads and for float32-valued clouds in the binary format.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import Box3D, ObjectClass, PointCloud, normalize_yaw, points_in_box, rotation_z
from .voxelize import GridSpec

KITTI_RECORD_BYTES = 16  # four little-endian float32: x, y, z, intensity

_CLASS_NAMES = {"Car": ObjectClass.CAR, "Pedestrian": ObjectClass.PEDESTRIAN, "Cyclist": ObjectClass.CYCLIST}
_CLASS_LABELS = {v: k for k, v in _CLASS_NAMES.items()}


class SceneFormatError(ValueError):
    """Malformed scene input; the message names the offending location."""


@dataclass(eq=False)
class Scene:
    """A point cloud with optional ground-truth boxes and precomputed scores."""

    cloud: PointCloud
    gt_boxes: list[Box3D] = field(default_factory=list)
    scores: np.ndarray | None = None
    frame_id: str = ""
    source: str = ""

    def __post_init__(self) -> None:
        if self.scores is not None:
            scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(scores) != len(self.cloud):
                raise SceneFormatError(
                    f"scores: expected {len(self.cloud)} values, got {len(scores)}"
                )
            if len(scores) and (scores.min() < 0 or scores.max() > 1):
                raise SceneFormatError("scores: values must lie in [0, 1]")
            self.scores = scores


# ---------------------------------------------------------------------------
# KITTI binary point clouds
# ---------------------------------------------------------------------------

def read_kitti_bin(path) -> PointCloud:
    """Parse consecutive little-endian float32 (x, y, z, intensity) records.

    Raises:
        SceneFormatError: when the file length is not a multiple of 16 bytes;
            the message carries the offset of the trailing partial record.
    """
    raw = Path(path).read_bytes()
    if len(raw) % KITTI_RECORD_BYTES != 0:
        offset = len(raw) - len(raw) % KITTI_RECORD_BYTES
        raise SceneFormatError(
            f"{path}: truncated record at byte offset {offset} (file length {len(raw)})"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(data[:, :3], data[:, 3:4])


def write_kitti_bin(path, cloud: PointCloud) -> None:
    """Write (x, y, z, intensity) float32 records; intensity 0 when featureless."""
    n = len(cloud)
    data = np.zeros((n, 4), dtype="<f4")
    data[:, :3] = cloud.xyz
    if cloud.feat_dim >= 1:
        data[:, 3] = cloud.feat[:, 0]
    Path(path).write_bytes(data.tobytes())


# ---------------------------------------------------------------------------
# JSON scenes
# ---------------------------------------------------------------------------

def _require(cond: bool, where: str, message: str) -> None:
    if not cond:
        raise SceneFormatError(f"{where}: {message}")


def _parse_box(obj, where: str) -> Box3D:
    _require(isinstance(obj, dict), where, f"expected an object, got {type(obj).__name__}")
    for key in ("center", "size", "yaw", "class"):
        _require(key in obj, where, f"missing field {key!r}")
    center = obj["center"]
    size = obj["size"]
    _require(
        isinstance(center, list) and len(center) == 3 and all(isinstance(v, (int, float)) for v in center),
        f"{where}.center", "expected [x, y, z] numbers",
    )
    _require(
        isinstance(size, list) and len(size) == 3 and all(isinstance(v, (int, float)) for v in size),
        f"{where}.size", "expected [l, w, h] numbers",
    )
    _require(all(v > 0 for v in size), f"{where}.size", "box sizes must be positive")
    _require(isinstance(obj["yaw"], (int, float)), f"{where}.yaw", "expected a number")
    _require(obj["class"] in _CLASS_NAMES, f"{where}.class", f"unknown class {obj['class']!r}")
    yaw = float(obj["yaw"])
    if not -math.pi <= yaw < math.pi:
        warnings.warn(f"{where}.yaw: {yaw} outside [-pi, pi), normalizing", stacklevel=3)
        yaw = normalize_yaw(yaw)
    return Box3D(
        float(center[0]), float(center[1]), float(center[2]),
        float(size[0]), float(size[1]), float(size[2]),
        yaw=yaw, class_id=_CLASS_NAMES[obj["class"]],
    )


def scene_from_dict(doc, where: str = "scene") -> Scene:
    """Validate a parsed JSON document into a Scene."""
    _require(isinstance(doc, dict), where, f"expected an object, got {type(doc).__name__}")
    _require("points" in doc, where, "missing field 'points'")
    points = doc["points"]
    _require(isinstance(points, list), f"{where}.points", "expected a list of rows")
    width = None
    rows = []
    for i, row in enumerate(points):
        _require(
            isinstance(row, list) and all(isinstance(v, (int, float)) for v in row),
            f"{where}.points[{i}]", "expected a list of numbers",
        )
        _require(len(row) >= 3, f"{where}.points[{i}]", f"need at least x, y, z; got {len(row)} values")
        if width is None:
            width = len(row)
        _require(len(row) == width, f"{where}.points[{i}]", f"row length {len(row)} != {width}")
        rows.append([float(v) for v in row])
    arr = np.asarray(rows, dtype=np.float64) if rows else np.empty((0, 3))
    try:
        cloud = PointCloud(arr[:, :3], arr[:, 3:])
    except ValueError as exc:
        raise SceneFormatError(f"{where}.points: {exc}") from exc

    boxes = []
    raw_boxes = doc.get("boxes", [])
    _require(isinstance(raw_boxes, list), f"{where}.boxes", "expected a list")
    for i, raw in enumerate(raw_boxes):
        boxes.append(_parse_box(raw, f"{where}.boxes[{i}]"))

    scores = doc.get("scores")
    if scores is not None:
        _require(
            isinstance(scores, list) and all(isinstance(v, (int, float)) for v in scores),
            f"{where}.scores", "expected a list of numbers",
        )
    frame_id = doc.get("frame_id", "")
    source = doc.get("source", "")
    _require(isinstance(frame_id, str), f"{where}.frame_id", "expected a string")
    _require(isinstance(source, str), f"{where}.source", "expected a string")
    return Scene(cloud, boxes, scores, frame_id, source)


def box_to_dict(box: Box3D) -> dict:
    return {
        "center": [box.cx, box.cy, box.cz],
        "size": [box.l, box.w, box.h],
        "yaw": box.yaw,
        "class": _CLASS_LABELS[box.class_id],
    }


def scene_to_dict(scene: Scene) -> dict:
    doc: dict = {
        "frame_id": scene.frame_id,
        "source": scene.source,
        "points": [
            [float(v) for v in row] for row in np.hstack([scene.cloud.xyz, scene.cloud.feat])
        ],
        "boxes": [box_to_dict(b) for b in scene.gt_boxes],
    }
    if scene.scores is not None:
        doc["scores"] = [float(s) for s in scene.scores]
    return doc


def read_scene_json(path) -> Scene:
    """Parse and strictly validate a JSON scene file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return scene_from_dict(doc, where=str(path))


def write_scene_json(path, scene: Scene) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1), encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

def _f32(arr: np.ndarray) -> np.ndarray:
    """Round to float32-representable values (exact binary round-trips)."""
    return arr.astype(np.float32).astype(np.float64)


def generate_scene(
    seed: int,
    spec: GridSpec = GridSpec.small(),
    n_points: int = 2000,
    n_boxes: int = 2,
    fg_fraction: float = 0.05,
    feat_dim: int = 1,
    frame_id: str | None = None,
) -> Scene:
    """Seeded synthetic scene: car-sized boxes with clustered interior points.

    Roughly ``fg_fraction`` of the points are drawn inside the boxes; the rest
    are uniform over the grid range. All coordinates and features are
    float32-representable so binary round-trips are exact.
    """
    rng = np.random.default_rng(seed)
    lo, hi = spec.mins, spec.maxs
    margin = np.array([3.0, 3.0, 0.0])
    boxes = []
    for _ in range(n_boxes):
        center = rng.uniform(lo + margin, hi - margin)
        boxes.append(
            Box3D(
                float(center[0]), float(center[1]), float(rng.uniform(-1.2, -0.4)),
                l=float(rng.uniform(3.2, 4.4)),
                w=float(rng.uniform(1.5, 1.9)),
                h=float(rng.uniform(1.4, 1.8)),
                yaw=float(rng.uniform(-math.pi, math.pi)),
                class_id=ObjectClass.CAR,
            )
        )
    n_fg = int(round(n_points * fg_fraction)) if boxes else 0
    fg_parts = []
    if n_fg:
        owners = rng.integers(0, len(boxes), size=n_fg)
        for bi, box in enumerate(boxes):
            count = int((owners == bi).sum())
            if count == 0:
                continue
            local = rng.uniform(-0.49, 0.49, size=(count, 3)) * box.size
            fg_parts.append(local @ rotation_z(box.yaw).T + box.center)
    # small interior margin keeps points inside [min, max) after f32 rounding
    bg = rng.uniform(lo + 1e-3, hi - 1e-3, size=(n_points - n_fg, 3))
    xyz = np.vstack(fg_parts + [bg]) if fg_parts else bg
    xyz = _f32(xyz)
    feat = _f32(rng.uniform(0.0, 1.0, size=(n_points, feat_dim)))
    perm = rng.permutation(n_points)
    cloud = PointCloud(xyz[perm], feat[perm])
    return Scene(
        cloud,
        boxes,
        frame_id=frame_id if frame_id is not None else f"synthetic-{seed:05d}",
        source="generated",
    )


def foreground_fraction(scene: Scene, indices: np.ndarray | None = None) -> float:
    """Fraction of (selected) points lying inside any ground-truth box."""
    cloud = scene.cloud if indices is None else scene.cloud.take(indices)
    if len(cloud) == 0:
        return 0.0
    mask = np.zeros(len(cloud), dtype=bool)
    for box in scene.gt_boxes:
        mask |= points_in_box(cloud.xyz, box)
    return float(mask.mean())
