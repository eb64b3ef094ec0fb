"""Offline frustum extraction and point recoding.

Every point that projects inside a (filtered, enlarged) 2D detection is
emitted once per such detection, widened by three channels:
``seg_label`` (inside any GT box), ``cls_label`` (the detection's class) and
``index_label`` (the detection's position among surviving detections).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .geom import (
    Box2D,
    Box3D,
    enlarge_box2d,
    filter_detections,
    points_in_any_box3d,
    points_in_box2d,
    project_points,
)
from .kitti_io import FrameBundle

DEFAULT_MIN_CONF = 0.1
TRAIN_MAX_FRAC = 0.10
INFER_FRAC = 0.05

SEG_COL, CLS_COL, INDEX_COL = -3, -2, -1

JitterMode = Literal["train", "infer", "none"]


@dataclass
class RecodedCloud:
    """Rows of ``D + 3`` float32 channels, grouped detection by detection."""

    points: np.ndarray
    frame_id: str = ""
    n_detections: int = 0
    boxes: list[Box2D] = field(default_factory=list)

    @property
    def n_base(self) -> int:
        return self.points.shape[1] - 3

    @property
    def seg_label(self) -> np.ndarray:
        return self.points[:, SEG_COL]

    @property
    def cls_label(self) -> np.ndarray:
        return self.points[:, CLS_COL]

    @property
    def index_label(self) -> np.ndarray:
        return self.points[:, INDEX_COL]


@dataclass
class RecodeOpts:
    min_conf: float = DEFAULT_MIN_CONF
    jitter: JitterMode = "infer"
    seed: int = 0


def frame_seed(seed: int, frame_id: str) -> np.random.SeedSequence:
    """Per-frame random stream, independent of processing order."""
    digest = hashlib.sha256(frame_id.encode("utf-8")).digest()
    return np.random.SeedSequence([seed, int.from_bytes(digest[:8], "little")])


def train_jitter(b: Box2D, rng, max_frac: float = TRAIN_MAX_FRAC) -> Box2D:
    frac_w, frac_h = rng.uniform(0.0, max_frac, size=2)
    return enlarge_box2d(b, float(frac_w), float(frac_h))


def infer_jitter(b: Box2D, frac: float = INFER_FRAC) -> Box2D:
    return enlarge_box2d(b, frac, frac)


def assign_seg_label(p, gt: Sequence[Box3D]) -> int:
    """1 if the point lies in any GT box (class is not consulted), else 0."""
    return int(points_in_any_box3d(np.asarray(p, dtype=np.float64)[:3], gt)[0])


def prepare_detections(dets: Sequence[Box2D], opts: RecodeOpts, frame_id: str = "") -> list[Box2D]:
    kept = filter_detections(dets, opts.min_conf)
    if opts.jitter == "train":
        rng = np.random.default_rng(frame_seed(opts.seed, frame_id))
        return [train_jitter(d, rng) for d in kept]
    if opts.jitter == "infer":
        return [infer_jitter(d) for d in kept]
    if opts.jitter == "none":
        return list(kept)
    raise ValueError(f"unknown jitter mode {opts.jitter!r}")


def recode_frame(frame: FrameBundle, opts: RecodeOpts | None = None) -> RecodedCloud:
    opts = opts or RecodeOpts()
    pts = np.asarray(frame.points, dtype=np.float32)
    n_base = pts.shape[1]
    boxes = prepare_detections(frame.detections, opts, frame.frame_id)

    uv, _ = project_points(frame.calib, pts[:, :3])
    members = [points_in_box2d(uv, b) for b in boxes]
    if not members:
        empty = np.zeros((0, n_base + 3), dtype=np.float32)
        return RecodedCloud(empty, frame.frame_id, 0, boxes)

    # Foreground test only for points that land in at least one frustum.
    in_any = np.logical_or.reduce(members)
    seg = np.zeros(len(pts), dtype=np.float32)
    seg[in_any] = points_in_any_box3d(pts[in_any, :3], frame.gt_boxes)

    chunks = []
    for i, (b, mask) in enumerate(zip(boxes, members)):
        idx = np.flatnonzero(mask)
        rows = np.empty((len(idx), n_base + 3), dtype=np.float32)
        rows[:, :n_base] = pts[idx]
        rows[:, SEG_COL] = seg[idx]
        rows[:, CLS_COL] = b.cls
        rows[:, INDEX_COL] = i
        chunks.append(rows)
    return RecodedCloud(np.concatenate(chunks), frame.frame_id, len(boxes), boxes)
