"""Oriented-box geometry: similarity transforms, rotated IoU, NMS, residual codecs.

Conventions used throughout the package: right-handed frame with z up; yaw is
counter-clockwise about +z measured from +x and kept normalized to (-pi, pi];
a box footprint has length ``l`` along its heading, width ``w`` across it and
height ``h`` along z, all centered on (cx, cy, cz). The mirror transform
reflects across the x-z plane (y -> -y, yaw -> -yaw).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# Intersection polygons below this area (m^2) are treated as empty.
DEGENERATE_AREA = 1e-12


def wrap_angle(r: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    r = math.fmod(r, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    elif r > math.pi:
        r -= TWO_PI
    return r


@dataclass(frozen=True)
class Box3D:
    """7-DoF oriented box: center (m), width/height/length (m), yaw (rad)."""

    cx: float
    cy: float
    cz: float
    w: float
    h: float
    l: float
    r: float

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.cz, self.w, self.h, self.l, self.r)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box field: {vals}")
        if self.w <= 0 or self.h <= 0 or self.l <= 0:
            raise ValueError(f"box sizes must be positive: w={self.w} h={self.h} l={self.l}")
        object.__setattr__(self, "r", wrap_angle(self.r))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.h, self.l, self.r])

    @property
    def volume(self) -> float:
        return self.w * self.h * self.l

    def corners_bev(self) -> np.ndarray:
        """Footprint corners, CCW, shape (4, 2)."""
        c, s = math.cos(self.r), math.sin(self.r)
        hl, hw = 0.5 * self.l, 0.5 * self.w
        # local (along-heading, across-heading) offsets, CCW order
        local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
        return np.array([(self.cx + c * u - s * v, self.cy + s * u + c * v) for u, v in local])


@dataclass(frozen=True)
class Transform:
    """Composable scene action: mirror across x-z plane, then rotate about z, then scale."""

    flip_y: bool = False
    theta: float = 0.0
    s: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.theta) and math.isfinite(self.s)):
            raise ValueError("transform parameters must be finite")
        if self.s <= 0:
            raise ValueError(f"scale must be positive, got {self.s}")

    @staticmethod
    def identity() -> "Transform":
        return Transform()

    @property
    def is_identity(self) -> bool:
        return not self.flip_y and self.theta == 0.0 and self.s == 1.0


def invert(t: Transform) -> Transform:
    """Exact inverse action, again in flip -> rotate -> scale form.

    Conjugating a rotation by the mirror reverses it, which is what lets the
    inverse collapse back into the same canonical order.
    """
    theta = t.theta if t.flip_y else -t.theta
    return Transform(flip_y=t.flip_y, theta=theta, s=1.0 / t.s)


def compose(outer: Transform, inner: Transform) -> Transform:
    """Transform equivalent to applying ``inner`` first, then ``outer``."""
    theta_inner = -inner.theta if outer.flip_y else inner.theta
    return Transform(
        flip_y=outer.flip_y != inner.flip_y,
        theta=wrap_angle(outer.theta + theta_inner),
        s=outer.s * inner.s,
    )


@dataclass
class PointCloud:
    """Points as float64 arrays: xyz (N, 3) and intensity (N,) in [0, 1]."""

    xyz: np.ndarray
    intensity: np.ndarray

    def __post_init__(self) -> None:
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) != len(self.xyz):
            raise ValueError("xyz and intensity lengths differ")
        if len(self.xyz) and not np.isfinite(self.xyz).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.xyz)

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.empty((0, 3)), np.empty((0,)))

    def copy(self) -> "PointCloud":
        return PointCloud(self.xyz.copy(), self.intensity.copy())


def transform_xy(t: Transform, xy: np.ndarray) -> np.ndarray:
    """Apply a transform to (N, 2) planar coordinates."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    x, y = xy[:, 0], xy[:, 1].copy()
    if t.flip_y:
        y = -y
    c, s = math.cos(t.theta), math.sin(t.theta)
    return np.stack([t.s * (c * x - s * y), t.s * (s * x + c * y)], axis=1)


def apply_points(t: Transform, pc: PointCloud) -> PointCloud:
    """Map every point through flip -> rotate -> scale; intensity is untouched."""
    if t.is_identity:
        return pc.copy()
    xyz = pc.xyz.copy()
    if t.flip_y:
        xyz[:, 1] = -xyz[:, 1]
    c, s = math.cos(t.theta), math.sin(t.theta)
    x, y = xyz[:, 0].copy(), xyz[:, 1].copy()
    xyz[:, 0] = c * x - s * y
    xyz[:, 1] = s * x + c * y
    xyz *= t.s
    return PointCloud(xyz, pc.intensity.copy())


def apply_box(t: Transform, b: Box3D) -> Box3D:
    """Map a box covariantly: center as a point, sizes by s, yaw by flip/rotation."""
    cx, cy, cz = b.cx, b.cy, b.cz
    r = b.r
    if t.flip_y:
        cy = -cy
        r = -r
    c, s = math.cos(t.theta), math.sin(t.theta)
    cx, cy = c * cx - s * cy, s * cx + c * cy
    return Box3D(
        cx=t.s * cx,
        cy=t.s * cy,
        cz=t.s * cz,
        w=t.s * b.w,
        h=t.s * b.h,
        l=t.s * b.l,
        r=wrap_angle(r + t.theta),
    )


def _polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    if len(poly) < 3:
        return 0.0
    acc = 0.0
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        acc += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return abs(acc) * 0.5


def _clip_convex(
    subject: list[tuple[float, float]], clip: Sequence[tuple[float, float]]
) -> list[tuple[float, float]]:
    """Sutherland-Hodgman: clip a convex polygon by a CCW convex polygon."""
    output = subject
    n = len(clip)
    for k in range(n):
        if not output:
            return []
        p1x, p1y = clip[k]
        p2x, p2y = clip[(k + 1) % n]
        ex, ey = p2x - p1x, p2y - p1y
        inputlist = output
        output = []
        sx, sy = inputlist[-1]
        s_in = ex * (sy - p1y) - ey * (sx - p1x) >= -DEGENERATE_AREA
        # "inside" = left of the CCW edge, boundary-inclusive so shared edges
        # keep their vertices verbatim
        for qx, qy in inputlist:
            q_in = ex * (qy - p1y) - ey * (qx - p1x) >= -DEGENERATE_AREA
            if q_in != s_in:
                dx, dy = qx - sx, qy - sy
                den = ex * dy - ey * dx
                tpar = (ex * (p1y - sy) - ey * (p1x - sx)) / den
                output.append((sx + tpar * dx, sy + tpar * dy))
            if q_in:
                output.append((qx, qy))
            sx, sy, s_in = qx, qy, q_in
    return output


def _corners_list(box: Box3D) -> list[tuple[float, float]]:
    c, s = math.cos(box.r), math.sin(box.r)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    cx, cy = box.cx, box.cy
    return [
        (cx + c * hl - s * hw, cy + s * hl + c * hw),
        (cx - c * hl - s * hw, cy - s * hl + c * hw),
        (cx - c * hl + s * hw, cy - s * hl - c * hw),
        (cx + c * hl + s * hw, cy + s * hl - c * hw),
    ]


def _bev_overlap(a: Box3D, b: Box3D) -> tuple[float, float, float]:
    """(intersection area, area a, area b) of the two BEV footprints."""
    # cheap circumradius pre-reject before any corner math
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        # disjoint; areas only matter when the intersection is non-empty
        return 0.0, a.w * a.l, b.w * b.l
    ca, cb = _corners_list(a), _corners_list(b)
    area_a, area_b = _polygon_area(ca), _polygon_area(cb)
    if (
        max(p[0] for p in ca) < min(p[0] for p in cb)
        or max(p[0] for p in cb) < min(p[0] for p in ca)
        or max(p[1] for p in ca) < min(p[1] for p in cb)
        or max(p[1] for p in cb) < min(p[1] for p in ca)
    ):
        return 0.0, area_a, area_b
    inter = _clip_convex(ca, cb)
    area_i = _polygon_area(inter)
    if area_i < DEGENERATE_AREA:
        return 0.0, area_a, area_b
    return area_i, area_a, area_b


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Overlap-over-union of the rotated BEV footprints, in [0, 1]."""
    area_i, area_a, area_b = _bev_overlap(a, b)
    if area_i == 0.0:
        return 0.0
    return min(1.0, max(0.0, area_i / (area_a + area_b - area_i)))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric overlap-over-union: BEV intersection times vertical overlap."""
    zo = min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h) - max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h)
    if zo <= 0.0:
        return 0.0
    area_i, area_a, area_b = _bev_overlap(a, b)
    if area_i == 0.0:
        return 0.0
    vol_i = area_i * zo
    union = area_a * a.h + area_b * b.h - vol_i
    return min(1.0, max(0.0, vol_i / union))


def nms(dets: Sequence[tuple[Box3D, float]], iou_thresh: float) -> list[int]:
    """Greedy BEV-IoU suppression; returns kept indices in descending-score order.

    Ties in score break toward the earlier input index, so the result is a
    pure function of the input sequence.
    """
    for _, score in dets:
        if not math.isfinite(score):
            raise ValueError("nms scores must be finite")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    kept: list[int] = []
    for i in order:
        box = dets[i][0]
        if all(iou_bev(box, dets[j][0]) < iou_thresh for j in kept):
            kept.append(i)
    return kept


def encode_residual(target: Box3D, anchor: Box3D) -> np.ndarray:
    """Diagonal-normalized 7-vector residual of ``target`` relative to ``anchor``."""
    d = math.hypot(anchor.w, anchor.l)
    return np.array(
        [
            (target.cx - anchor.cx) / d,
            (target.cy - anchor.cy) / d,
            (target.cz - anchor.cz) / anchor.h,
            math.log(target.w / anchor.w),
            math.log(target.h / anchor.h),
            math.log(target.l / anchor.l),
            wrap_angle(target.r - anchor.r),
        ]
    )


def decode_residual(res: np.ndarray, anchor: Box3D) -> Box3D:
    """Inverse of :func:`encode_residual`."""
    d = math.hypot(anchor.w, anchor.l)
    return Box3D(
        cx=anchor.cx + float(res[0]) * d,
        cy=anchor.cy + float(res[1]) * d,
        cz=anchor.cz + float(res[2]) * anchor.h,
        w=anchor.w * math.exp(float(res[3])),
        h=anchor.h * math.exp(float(res[4])),
        l=anchor.l * math.exp(float(res[5])),
        r=wrap_angle(anchor.r + float(res[6])),
    )


def average_boxes(boxes: Sequence[Box3D]) -> Box3D:
    """Arithmetic mean of center and sizes; yaw averaged on the circle."""
    if not boxes:
        raise ValueError("average_boxes requires at least one box")
    arr = np.stack([b.as_array() for b in boxes])
    mean = arr[:, :6].mean(axis=0)
    r = math.atan2(np.sin(arr[:, 6]).sum(), np.cos(arr[:, 6]).sum())
    return Box3D(mean[0], mean[1], mean[2], mean[3], mean[4], mean[5], wrap_angle(r))


def points_in_box(box: Box3D, xyz: np.ndarray, strict: bool = True) -> np.ndarray:
    """Boolean mask of points inside the rotated box (strict interior by default)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    dz = xyz[:, 2] - box.cz
    c, s = math.cos(box.r), math.sin(box.r)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if strict:
        return (
            (np.abs(u) < 0.5 * box.l) & (np.abs(v) < 0.5 * box.w) & (np.abs(dz) < 0.5 * box.h)
        )
    return (np.abs(u) <= 0.5 * box.l) & (np.abs(v) <= 0.5 * box.w) & (np.abs(dz) <= 0.5 * box.h)
