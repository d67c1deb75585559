"""Box mathematics in the KITTI camera frame (x right, y down, z forward).

Boxes are anchored at the center of their bottom face and rotate about the
vertical (y) axis. BEV quantities live in the camera x-z plane.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateYaw,
    FullyOutsideImage,
    InvalidBox,
    OutOfRange,
)


# Normalization constants shared by the 3D targets and the BEV rectangles.
X_SCALE = 40.0
Y_CENTER, Y_SCALE = 2.0, 2.0
Z_CENTER, Z_SCALE = 50.0, 50.0
W_CENTER = 1.5
L_CENTER = 3.5
H_CENTER = 1.5

X_RANGE = (-40.0, 40.0)
Y_RANGE = (0.0, 4.0)
Z_RANGE = (0.0, 100.0)
W_MAX, L_MAX, H_MAX = 3.0, 7.0, 3.0

_DEGENERATE_NORM2 = 1e-12

Point2 = Tuple[float, float]


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float  # noqa: E741 - KITTI naming
    h: float
    yaw: float

    def __post_init__(self) -> None:
        vals = (self.x, self.y, self.z, self.w, self.l, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBox(f"non-finite box field in {vals}")
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise InvalidBox(f"box dimensions must be positive, got w={self.w} l={self.l} h={self.h}")
        if not (-math.pi <= self.yaw <= math.pi):
            raise InvalidBox(f"yaw {self.yaw} outside [-pi, pi]")

    def as_tuple(self) -> Tuple[float, ...]:
        return (self.x, self.y, self.z, self.w, self.l, self.h, self.yaw)


@dataclass(frozen=True)
class TargetVector:
    tx: float
    ty: float
    tz: float
    tw: float
    tl: float
    th: float
    tsin: float
    tcos: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.tx, self.ty, self.tz, self.tw, self.tl, self.th, self.tsin, self.tcos],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "TargetVector":
        if len(values) != 8:
            raise ValueError(f"target vector needs 8 values, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class BevRect:
    """Axis-aligned top-view rectangle in normalized [-1, 1] coordinates."""

    x1: float
    z1: float
    x2: float
    z2: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.z1, self.x2, self.z2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)


@dataclass(frozen=True)
class BevQuad:
    """Four (x, z) vertices in meters, counter-clockwise."""

    points: Tuple[Point2, Point2, Point2, Point2]

    def as_array(self) -> np.ndarray:
        return np.array(self.points, dtype=np.float64)

    @property
    def area(self) -> float:
        return polygon_area(self.points)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: int
    image_h: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError("image size must be positive")

    @classmethod
    def kitti_default(cls) -> "CameraIntrinsics":
        return cls(fx=721.5, fy=721.5, cx=621.0, cy=187.5, image_w=1242, image_h=375)


@dataclass(frozen=True)
class FrontalBox:
    box: Box2D  # clipped to the image
    unclipped: Box2D
    truncation: float


def _check_range(name: str, value: float, lo: float, hi: float, lo_open: bool = False) -> None:
    bad = value <= lo if lo_open else value < lo
    if bad or value > hi:
        left = "(" if lo_open else "["
        raise OutOfRange(f"{name}={value} outside {left}{lo}, {hi}]")


def normalize_targets(b: Box3D, clamp: bool = False) -> TargetVector:
    """Map a box onto the 8 regression targets, each in [-1, 1].

    With ``clamp`` the location/dimension fields are clipped into range
    instead of raising OutOfRange.
    """
    x, y, z, w, l, h = b.x, b.y, b.z, b.w, b.l, b.h
    if clamp:
        x = min(max(x, X_RANGE[0]), X_RANGE[1])
        y = min(max(y, Y_RANGE[0]), Y_RANGE[1])
        z = min(max(z, Z_RANGE[0]), Z_RANGE[1])
        w, l, h = min(w, W_MAX), min(l, L_MAX), min(h, H_MAX)
    else:
        _check_range("x", x, *X_RANGE)
        _check_range("y", y, *Y_RANGE)
        _check_range("z", z, *Z_RANGE)
        _check_range("w", w, 0.0, W_MAX, lo_open=True)
        _check_range("l", l, 0.0, L_MAX, lo_open=True)
        _check_range("h", h, 0.0, H_MAX, lo_open=True)
    return TargetVector(
        tx=x / X_SCALE,
        ty=(y - Y_CENTER) / Y_SCALE,
        tz=(z - Z_CENTER) / Z_SCALE,
        tw=(w - W_CENTER) / W_CENTER,
        tl=(l - L_CENTER) / L_CENTER,
        th=(h - H_CENTER) / H_CENTER,
        tsin=math.sin(b.yaw),
        tcos=math.cos(b.yaw),
    )


def decode_yaw(tsin: float, tcos: float) -> float:
    if tsin * tsin + tcos * tcos < _DEGENERATE_NORM2:
        raise DegenerateYaw(f"yaw undefined for (sin, cos)=({tsin}, {tcos})")
    yaw = math.atan2(tsin, tcos)
    return math.pi if yaw == -math.pi else yaw


def denormalize_targets(t: TargetVector) -> Box3D:
    vals = t.as_array()
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"non-finite target vector {vals.tolist()}")
    yaw = decode_yaw(t.tsin, t.tcos)
    return Box3D(
        x=t.tx * X_SCALE,
        y=t.ty * Y_SCALE + Y_CENTER,
        z=t.tz * Z_SCALE + Z_CENTER,
        w=t.tw * W_CENTER + W_CENTER,
        l=t.tl * L_CENTER + L_CENTER,
        h=t.th * H_CENTER + H_CENTER,
        yaw=yaw,
    )


def _rotation_y(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], dtype=np.float64)


def box_corners_3d(b: Box3D) -> np.ndarray:
    """(8, 3) corners; rows 0-3 bottom face (y), rows 4-7 top face (y - h).

    Both faces list their corners counter-clockwise in the x-z plane.
    """
    hl, hw = b.l / 2.0, b.w / 2.0
    a = np.array([hl, -hl, -hl, hl, hl, -hl, -hl, hl])
    c = np.array([hw, hw, -hw, -hw, hw, hw, -hw, -hw])
    yoff = np.array([0.0] * 4 + [-b.h] * 4)
    local = np.stack([a, yoff, c], axis=0)
    return (_rotation_y(b.yaw) @ local).T + np.array([b.x, b.y, b.z])


def project_point(k: CameraIntrinsics, p: Sequence[float]) -> Tuple[float, float]:
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    if z <= 0:
        raise BehindCamera(f"point {x, y, z} is behind the camera")
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy)


def project_points(k: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    """Vectorized pinhole projection of (N, 3) points to (N, 2) pixels."""
    pts = np.asarray(pts, dtype=np.float64)
    if np.any(pts[:, 2] <= 0):
        raise BehindCamera("at least one point is behind the camera")
    u = k.fx * pts[:, 0] / pts[:, 2] + k.cx
    v = k.fy * pts[:, 1] / pts[:, 2] + k.cy
    return np.stack([u, v], axis=1)


def frontal_bbox(k: CameraIntrinsics, b: Box3D) -> FrontalBox:
    uv = project_points(k, box_corners_3d(b))
    u1, v1 = float(uv[:, 0].min()), float(uv[:, 1].min())
    u2, v2 = float(uv[:, 0].max()), float(uv[:, 1].max())
    unclipped = Box2D(u1, v1, u2, v2)
    clipped = Box2D(
        min(max(u1, 0.0), k.image_w),
        min(max(v1, 0.0), k.image_h),
        min(max(u2, 0.0), k.image_w),
        min(max(v2, 0.0), k.image_h),
    )
    if clipped.width <= 0 or clipped.height <= 0:
        raise FullyOutsideImage(f"projected box {unclipped} does not intersect the image")
    full = unclipped.area
    truncation = 1.0 - clipped.area / full if full > 0 else 0.0
    return FrontalBox(box=clipped, unclipped=unclipped, truncation=max(0.0, truncation))


def polygon_area(points: Iterable[Sequence[float]]) -> float:
    """Signed shoelace area; positive for counter-clockwise vertices."""
    pts = np.asarray(list(points), dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def bev_footprint(b: Box3D) -> BevQuad:
    bottom = box_corners_3d(b)[:4]
    pts = [(float(p[0]), float(p[2])) for p in bottom]
    if polygon_area(pts) < 0:
        pts.reverse()
    return BevQuad(points=(pts[0], pts[1], pts[2], pts[3]))


def bev_axis_aligned_normalized(q: BevQuad, clamp: bool = False) -> BevRect:
    pts = q.as_array()
    x1, x2 = float(pts[:, 0].min()), float(pts[:, 0].max())
    z1, z2 = float(pts[:, 1].min()), float(pts[:, 1].max())
    if clamp:
        x1, x2 = max(x1, X_RANGE[0]), min(x2, X_RANGE[1])
        z1, z2 = max(z1, Z_RANGE[0]), min(z2, Z_RANGE[1])
    elif x1 < X_RANGE[0] or x2 > X_RANGE[1] or z1 < Z_RANGE[0] or z2 > Z_RANGE[1]:
        raise OutOfRange(f"BEV extent x[{x1}, {x2}] z[{z1}, {z2}] leaves the map")
    return BevRect(
        x1=x1 / X_SCALE,
        z1=(z1 - Z_CENTER) / Z_SCALE,
        x2=x2 / X_SCALE,
        z2=(z2 - Z_CENTER) / Z_SCALE,
    )


def denormalize_bev(r: BevRect) -> Tuple[float, float, float, float]:
    """Normalized rectangle back to meters as (x1, z1, x2, z2)."""
    return (
        r.x1 * X_SCALE,
        r.z1 * Z_SCALE + Z_CENTER,
        r.x2 * X_SCALE,
        r.z2 * Z_SCALE + Z_CENTER,
    )


def canonicalize_rect(values: Sequence[float]) -> BevRect:
    """Sort raw (x1, z1, x2, z2) network outputs so x1 <= x2 and z1 <= z2."""
    x1, z1, x2, z2 = (float(v) for v in values)
    return BevRect(min(x1, x2), min(z1, z2), max(x1, x2), max(z1, z2))


def _as_rect(r) -> Tuple[float, float, float, float]:
    if hasattr(r, "as_tuple"):
        r = r.as_tuple()
    x1, y1, x2, y2 = (float(v) for v in r)
    return x1, y1, x2, y2


def iou_axis_aligned(a, b) -> float:
    ax1, ay1, ax2, ay2 = _as_rect(a)
    bx1, by1, bx2, by2 = _as_rect(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def clip_convex(subject: Sequence[Point2], clip: Sequence[Point2]) -> list:
    """Clip a polygon by a counter-clockwise convex polygon, one half-plane per clip edge."""
    output = [tuple(map(float, p)) for p in subject]
    cp1 = clip[-1]
    for cp2 in clip:
        if not output:
            return []
        ex, ez = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def side(p, _cp1=cp1, _ex=ex, _ez=ez) -> float:
            return _ex * (p[1] - _cp1[1]) - _ez * (p[0] - _cp1[0])

        inputs, output = output, []
        s = inputs[-1]
        ds = side(s)
        for e in inputs:
            de = side(e)
            if de >= 0:
                if ds < 0:
                    t = ds / (ds - de)
                    output.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
                output.append(e)
            elif ds >= 0:
                t = ds / (ds - de)
                output.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
            s, ds = e, de
        cp1 = cp2
    return output


def _ccw(points: Sequence[Point2]) -> list:
    pts = [tuple(map(float, p)) for p in points]
    return pts if polygon_area(pts) >= 0 else pts[::-1]


def iou_rotated(a: BevQuad, b: BevQuad) -> float:
    pa, pb = _ccw(a.points), _ccw(b.points)
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    inter_poly = clip_convex(pa, pb)
    inter = abs(polygon_area(inter_poly)) if len(inter_poly) >= 3 else 0.0
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))
