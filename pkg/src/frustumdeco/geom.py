"""Geometric primitives: projection, box containment and 2D box enlargement.

Conventions: points live in the LiDAR frame (x forward, y left, z up). 3D boxes
are center-anchored in that frame with yaw ``ry`` about the vertical axis and
length ``l`` along the box-local x axis, width ``w`` along y, height ``h``
along z. Containment tests are closed on every face and edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import BehindCamera, MalformedMatrix


@dataclass(frozen=True)
class Calib:
    """LiDAR-to-rectified-camera transform ``T`` (4x4) and projection ``C`` (3x4)."""

    T: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.T, dtype=np.float64)
        C = np.asarray(self.C, dtype=np.float64)
        if T.shape != (4, 4) or C.shape != (3, 4):
            raise MalformedMatrix(f"expected T 4x4 and C 3x4, got {T.shape} and {C.shape}")
        if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
            raise MalformedMatrix("last row of T must be (0, 0, 0, 1)")
        if not np.any(C[2, :3]):
            raise MalformedMatrix("third row of C has a zero leading 3-vector")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "C", C)


@dataclass(frozen=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float
    cls: int = 0
    conf: float = 1.0

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    h: float
    w: float
    l: float
    ry: float
    cls: int = field(default=-1, compare=False)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


# ---------------------------------------------------------------- projection

def project_points(calib: Calib, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project LiDAR points to pixels.

    Returns ``(uv, in_front)`` where ``uv`` is (N, 2) and ``in_front`` flags
    points whose depth after ``T`` is strictly positive. Entries of ``uv`` for
    points behind the camera are NaN.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    T, C = calib.T, calib.C
    cam = xyz @ T[:3, :3].T + T[:3, 3]
    in_front = cam[:, 2] > 0.0
    hom = cam @ C[:, :3].T + C[:, 3]
    uv = np.full((len(xyz), 2), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv[in_front] = hom[in_front, :2] / hom[in_front, 2:3]
    return uv, in_front


def project_point(calib: Calib, p: Sequence[float]) -> tuple[float, float]:
    uv, in_front = project_points(calib, np.asarray(p, dtype=np.float64)[:3])
    if not in_front[0]:
        raise BehindCamera(f"point {tuple(p[:3])} has non-positive camera depth")
    return float(uv[0, 0]), float(uv[0, 1])


# -------------------------------------------------------------- containment

def points_in_box2d(uv: np.ndarray, b: Box2D) -> np.ndarray:
    u, v = uv[:, 0], uv[:, 1]
    # NaN pixels (behind camera) compare False on every edge.
    return (u >= b.x1) & (u <= b.x2) & (v >= b.y1) & (v <= b.y2)


def point_in_box2d(px: Sequence[float], b: Box2D) -> bool:
    return bool(points_in_box2d(np.asarray([px], dtype=np.float64), b)[0])


def box3d_local(xyz: np.ndarray, b: Box3D) -> np.ndarray:
    """Points in the box frame: translate by -center, then rotate by -ry."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    d = xyz - (b.cx, b.cy, b.cz)
    c, s = math.cos(b.ry), math.sin(b.ry)
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)


def points_in_box3d(xyz: np.ndarray, b: Box3D) -> np.ndarray:
    loc = box3d_local(xyz, b)
    return (
        (np.abs(loc[:, 0]) <= 0.5 * b.l)
        & (np.abs(loc[:, 1]) <= 0.5 * b.w)
        & (np.abs(loc[:, 2]) <= 0.5 * b.h)
    )


def point_in_box3d(p: Sequence[float], b: Box3D) -> bool:
    return bool(points_in_box3d(np.asarray(p, dtype=np.float64)[:3], b)[0])


def points_in_any_box3d(xyz: np.ndarray, boxes: Iterable[Box3D]) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    hit = np.zeros(len(xyz), dtype=bool)
    for b in boxes:
        hit |= points_in_box3d(xyz, b)
    return hit


def box3d_corners(b: Box3D) -> np.ndarray:
    """(8, 3) corners; the first four share z = cz + h/2, ordered counter-clockwise."""
    sx = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * 0.5 * b.l
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * 0.5 * b.w
    sz = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * 0.5 * b.h
    c, s = math.cos(b.ry), math.sin(b.ry)
    x = c * sx - s * sy + b.cx
    y = s * sx + c * sy + b.cy
    return np.stack([x, y, sz + b.cz], axis=1)


def box3d_array(boxes: Sequence[Box3D]) -> np.ndarray:
    return np.array([[b.cx, b.cy, b.cz, b.h, b.w, b.l, b.ry] for b in boxes], dtype=np.float64).reshape(-1, 7)


# ---------------------------------------------------------------- 2D boxes

def enlarge_box2d(b: Box2D, frac_w: float, frac_h: float) -> Box2D:
    """Grow width and height by ``(1 + frac)`` about the box center."""
    if frac_w < 0 or frac_h < 0:
        raise ValueError("enlargement fractions must be non-negative")
    if frac_w == 0 and frac_h == 0:
        return b
    # Push each edge outward by the same margin rather than rebuilding from the
    # center, so rounding can never shrink a side.
    dw = 0.5 * b.width * frac_w
    dh = 0.5 * b.height * frac_h
    return replace(b, x1=b.x1 - dw, x2=b.x2 + dw, y1=b.y1 - dh, y2=b.y2 + dh)


def filter_detections(dets: Sequence[Box2D], min_conf: float) -> list[Box2D]:
    """Drop detections scoring below ``min_conf``; a score equal to it is kept."""
    return [d for d in dets if d.conf >= min_conf]
