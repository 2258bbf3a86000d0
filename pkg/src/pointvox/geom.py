"""Core 3D geometry: oriented boxes, point-in-box tests, rotated IoU, augmentation.

All operations are pure functions over immutable inputs and safe to call
concurrently. Boxes rotate about the Z axis only (yaw), which is the usual
convention for ground-plane LiDAR scenes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

# Collinearity / degeneracy epsilon for the polygon clipper.
CLIP_EPS = 1e-9


class ObjectClass(enum.IntEnum):
    CAR = 0
    PEDESTRIAN = 1
    CYCLIST = 2


def normalize_yaw(angle: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return float((angle + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center, size, yaw about Z.

    Attributes:
        cx, cy, cz: center in meters.
        l, w, h: extents in meters along the box x/y/z axes; must be > 0.
        yaw: rotation about Z in radians; normalized into [-pi, pi).
        class_id: object category.
    """

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    class_id: ObjectClass = ObjectClass.CAR

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "cz", "l", "w", "h", "yaw"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"Box3D.{name} must be finite, got {v!r}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"Box3D sizes must be positive, got l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz], dtype=np.float64)

    @property
    def size(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h], dtype=np.float64)

    @property
    def bev_area(self) -> float:
        return self.l * self.w

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def with_yaw(self, yaw: float) -> "Box3D":
        return replace(self, yaw=yaw)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with xyz coordinates (meters) plus a d-dimensional feature each.

    ``xyz`` has shape (N, 3); ``feat`` has shape (N, d) with d >= 0 and a
    uniform length across the cloud. Coordinates must be finite.
    """

    xyz: np.ndarray
    feat: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        xyz = np.asarray(self.xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must have shape (N, 3), got {xyz.shape}")
        if not np.isfinite(xyz).all():
            raise ValueError("point coordinates must be finite")
        feat = self.feat
        if feat is None:
            feat = np.empty((len(xyz), 0), dtype=np.float64)
        feat = np.asarray(feat, dtype=np.float64)
        if feat.ndim == 1:
            feat = feat[:, None]
        if feat.ndim != 2 or feat.shape[0] != xyz.shape[0]:
            raise ValueError(f"feat must have shape (N, d) with N={xyz.shape[0]}, got {feat.shape}")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "feat", feat)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feat.shape[1]

    def point_vectors(self) -> np.ndarray:
        """Return the (N, 3 + d) array of xyz concatenated with features."""
        return np.hstack([self.xyz, self.feat])

    def take(self, indices: np.ndarray) -> "PointCloud":
        idx = np.asarray(indices)
        return PointCloud(self.xyz[idx], self.feat[idx])


class AugmentMode(enum.Enum):
    FLIP_X = "flip_x"
    ROTATE_Z = "rotate_z"
    SCALE = "scale"


@dataclass(frozen=True)
class AugmentParams:
    """One global scene transform: mirror across the X axis, yaw the scene, or rescale it.

    ``angle`` is only meaningful for ROTATE_Z (radians, [-pi/4, pi/4]);
    ``factor`` only for SCALE (dimensionless, [0.95, 1.05]).
    """

    mode: AugmentMode
    angle: float | None = None
    factor: float | None = None

    def __post_init__(self) -> None:
        if self.mode is AugmentMode.ROTATE_Z:
            if self.angle is None or self.factor is not None:
                raise ValueError("RotateZ takes an angle and no factor")
        elif self.mode is AugmentMode.SCALE:
            if self.factor is None or self.angle is not None:
                raise ValueError("Scale takes a factor and no angle")
        else:
            if self.angle is not None or self.factor is not None:
                raise ValueError("FlipX takes neither angle nor factor")

    @classmethod
    def flip_x(cls) -> "AugmentParams":
        return cls(AugmentMode.FLIP_X)

    @classmethod
    def rotate_z(cls, angle: float) -> "AugmentParams":
        return cls(AugmentMode.ROTATE_Z, angle=angle)

    @classmethod
    def scale(cls, factor: float) -> "AugmentParams":
        return cls(AugmentMode.SCALE, factor=factor)


def rotation_z(angle: float) -> np.ndarray:
    """3x3 rotation matrix about the Z axis."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def points_in_box(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    """Test which points lie inside an oriented box (boundary counts as inside).

    Args:
        xyz: (N, 3) point coordinates.
        box: the box to test against.

    Returns:
        (N,) boolean mask; True where the point, expressed in the box frame,
        satisfies |x'| <= l/2, |y'| <= w/2, |z'| <= h/2.
    """
    pts = np.asarray(xyz, dtype=np.float64)
    local = (pts - box.center) @ rotation_z(box.yaw)  # right-multiply == rotate by -yaw
    half = box.size / 2.0
    return np.all(np.abs(local) <= half, axis=1)


def point_in_box(p, box: Box3D) -> bool:
    """Scalar convenience wrapper around :func:`points_in_box`."""
    return bool(points_in_box(np.asarray(p, dtype=np.float64).reshape(1, 3), box)[0])


# Box-frame corner signs: bottom face counter-clockwise starting in the
# +x+y octant, then the top face in the same x/y order.
_CORNER_SIGNS = np.array(
    [
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, 1],
        [-1, 1, 1],
        [-1, -1, 1],
        [1, -1, 1],
    ],
    dtype=np.float64,
)


def box_corners(box: Box3D) -> np.ndarray:
    """Return the 8 box corners, shape (8, 3), in the fixed documented order.

    Order: bottom face counter-clockwise from the +x+y octant of the box
    frame, then the top face in the same order; rotated by yaw and translated
    to the world frame.
    """
    local = _CORNER_SIGNS * (box.size / 2.0)
    return local @ rotation_z(box.yaw).T + box.center


def bev_corners(box: Box3D) -> np.ndarray:
    """(4, 2) bird's-eye-view rectangle corners, counter-clockwise."""
    return box_corners(box)[:4, :2]


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area of a 2D polygon (positive when counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def clip_convex_polygon(subject: np.ndarray, clip: np.ndarray, eps: float = CLIP_EPS) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex ``subject`` polygon by convex ``clip``.

    Both polygons must wind counter-clockwise. Points within ``eps`` of a clip
    edge are treated as inside so shared edges do not produce spurious slivers.

    Returns:
        (K, 2) vertices of the intersection polygon; possibly empty.
    """
    output = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = b - a
        inputs = output
        output = []
        # side > -eps means the vertex is on the interior side of edge a->b
        sides = [edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) for p in inputs]
        m = len(inputs)
        for j in range(m):
            cur, nxt = inputs[j], inputs[(j + 1) % m]
            s_cur, s_nxt = sides[j], sides[(j + 1) % m]
            if s_cur >= -eps:
                output.append(cur)
                if s_nxt < -eps:
                    output.append(_edge_intersection(cur, nxt, s_cur, s_nxt))
            elif s_nxt >= -eps:
                output.append(_edge_intersection(cur, nxt, s_cur, s_nxt))
    if not output:
        return np.empty((0, 2), dtype=np.float64)
    return np.asarray(output, dtype=np.float64)


def _edge_intersection(p, q, sp, sq):
    # sp and sq are signed distances (scaled) with opposite signs; the zero
    # crossing parameterizes the intersection point on segment p->q.
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_rotated_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the yaw-rotated bird's-eye-view rectangles of two boxes.

    Computed by convex polygon clipping; degenerate (zero-area) rectangles
    yield 0. Areas are taken from the same corner representation as the
    intersection so identical boxes score exactly 1, and argument order is
    canonicalized internally so the result is exactly symmetric.
    """
    if _box_sort_key(b) < _box_sort_key(a):
        a, b = b, a
    ca, cb = bev_corners(a), bev_corners(b)
    area_a, area_b = abs(polygon_area(ca)), abs(polygon_area(cb))
    if area_a <= CLIP_EPS or area_b <= CLIP_EPS:
        return 0.0
    inter = abs(polygon_area(clip_convex_polygon(ca, cb)))
    union = area_a + area_b - inter
    if union <= CLIP_EPS:
        return 0.0
    return min(1.0, inter / union)


def iou3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: BEV intersection area times vertical overlap, over the volume union."""
    if _box_sort_key(b) < _box_sort_key(a):
        a, b = b, a
    ca, cb = bev_corners(a), bev_corners(b)
    area_a, area_b = abs(polygon_area(ca)), abs(polygon_area(cb))
    top_a, bot_a = a.cz + a.h / 2.0, a.cz - a.h / 2.0
    top_b, bot_b = b.cz + b.h / 2.0, b.cz - b.h / 2.0
    vol_a = area_a * (top_a - bot_a)
    vol_b = area_b * (top_b - bot_b)
    if vol_a <= CLIP_EPS or vol_b <= CLIP_EPS:
        return 0.0
    z_overlap = min(top_a, top_b) - max(bot_a, bot_b)
    if z_overlap <= 0.0:
        return 0.0
    inter = abs(polygon_area(clip_convex_polygon(ca, cb))) * z_overlap
    union = vol_a + vol_b - inter
    if union <= CLIP_EPS:
        return 0.0
    return min(1.0, inter / union)


def _box_sort_key(b: Box3D):
    return (b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw)


def augment(
    cloud: PointCloud, boxes: list[Box3D], params: AugmentParams
) -> tuple[PointCloud, list[Box3D]]:
    """Apply one global augmentation to a cloud and its boxes.

    FlipX mirrors y -> -y and negates yaw; RotateZ rotates coordinates about Z
    and shifts yaw; Scale multiplies coordinates, box centers, and box sizes.
    Point features are never touched and point-in-box membership is preserved
    by all three modes.
    """
    if params.mode is AugmentMode.FLIP_X:
        xyz = cloud.xyz.copy()
        xyz[:, 1] = -xyz[:, 1]
        new_boxes = [
            replace(b, cy=-b.cy, yaw=normalize_yaw(-b.yaw)) for b in boxes
        ]
    elif params.mode is AugmentMode.ROTATE_Z:
        rot = rotation_z(params.angle)
        xyz = cloud.xyz @ rot.T
        new_boxes = []
        for b in boxes:
            c = rot @ b.center
            new_boxes.append(
                replace(b, cx=c[0], cy=c[1], cz=c[2], yaw=normalize_yaw(b.yaw + params.angle))
            )
    else:
        f = params.factor
        xyz = cloud.xyz * f
        new_boxes = [
            replace(b, cx=b.cx * f, cy=b.cy * f, cz=b.cz * f, l=b.l * f, w=b.w * f, h=b.h * f)
            for b in boxes
        ]
    return PointCloud(xyz, cloud.feat), new_boxes
