"""Group recoded points into frustums, resample them and stack into batches."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyFrustum, InvalidClass, ShapeMismatch
from .hidden import CLS_COL, INDEX_COL, RecodedCloud

log = logging.getLogger(__name__)

DEFAULT_M = 2048


@dataclass
class Frustum:
    points: np.ndarray  # (k, D + 3)
    index: int
    cls: int
    origin_count: int
    one_hot: np.ndarray | None = None


@dataclass
class FrustumBatch:
    points: np.ndarray  # (B, m, D + 3) float32
    one_hot: np.ndarray  # (B, n_cls)
    indices: np.ndarray  # (B,)
    origin_counts: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def m(self) -> int:
        return self.points.shape[1]

    @property
    def features(self) -> np.ndarray:
        """Network input channels; the three label columns are excluded."""
        return self.points[:, :, :-3]

    @property
    def seg_label(self) -> np.ndarray:
        return self.points[:, :, -3]


def one_hot(cls: int, n_cls: int) -> np.ndarray:
    if not 0 <= cls < n_cls:
        raise InvalidClass(f"class {cls} outside 0..{n_cls - 1}")
    v = np.zeros(n_cls, dtype=np.float32)
    v[cls] = 1.0
    return v


def group_by_index(cloud: RecodedCloud | np.ndarray) -> list[Frustum]:
    rows = cloud.points if isinstance(cloud, RecodedCloud) else np.asarray(cloud)
    if len(rows) == 0:
        return []
    index = rows[:, INDEX_COL].astype(np.int64)
    order = np.argsort(index, kind="stable")
    uniq, starts = np.unique(index[order], return_index=True)
    groups = []
    for i, chunk in zip(uniq, np.split(order, starts[1:])):
        pts = rows[chunk]
        groups.append(Frustum(points=pts, index=int(i), cls=int(pts[0, CLS_COL]), origin_count=len(pts)))
    return groups


def resample(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``m`` rows: subsample without replacement, or pad by drawing with replacement."""
    k = len(points)
    if k == 0:
        raise EmptyFrustum("cannot resample an empty frustum")
    if k >= m:
        idx = rng.choice(k, size=m, replace=False)
    else:
        idx = np.concatenate([np.arange(k), rng.integers(0, k, size=m - k)])
    return points[idx]


def stack_batch(frustums: Sequence[Frustum]) -> FrustumBatch:
    if not frustums:
        return FrustumBatch(
            points=np.zeros((0, 0, 0), dtype=np.float32),
            one_hot=np.zeros((0, 0), dtype=np.float32),
            indices=np.zeros(0, dtype=np.int64),
            origin_counts=np.zeros(0, dtype=np.int64),
        )
    shapes = {f.points.shape for f in frustums}
    if len(shapes) != 1:
        raise ShapeMismatch(f"frustums have differing shapes {sorted(shapes)}")
    if any(f.one_hot is None for f in frustums) or len({f.one_hot.shape for f in frustums}) != 1:
        raise ShapeMismatch("every frustum needs a one-hot vector of the same length")
    return FrustumBatch(
        points=np.stack([f.points for f in frustums]).astype(np.float32, copy=False),
        one_hot=np.stack([f.one_hot for f in frustums]).astype(np.float32, copy=False),
        indices=np.array([f.index for f in frustums], dtype=np.int64),
        origin_counts=np.array([f.origin_count for f in frustums], dtype=np.int64),
    )


def unstack_batch(batch: FrustumBatch) -> list[Frustum]:
    return [
        Frustum(
            points=batch.points[b],
            index=int(batch.indices[b]),
            cls=int(np.argmax(batch.one_hot[b])),
            origin_count=int(batch.origin_counts[b]),
            one_hot=batch.one_hot[b],
        )
        for b in range(len(batch))
    ]


def build_frustums(cloud: RecodedCloud | np.ndarray, m: int | None, n_cls: int,
                   rng: np.random.Generator | None = None) -> list[Frustum]:
    """Group, optionally resample to ``m`` rows, and attach one-hot vectors.

    ``m=None`` keeps every frustum at its native size.
    """
    out = []
    for f in group_by_index(cloud):
        try:
            pts = f.points if m is None else resample(f.points, m, rng)
        except EmptyFrustum:
            log.warning("dropping empty frustum %d", f.index)
            continue
        out.append(Frustum(pts, f.index, f.cls, f.origin_count, one_hot(f.cls, n_cls)))
    return out


def build_batch(cloud: RecodedCloud | np.ndarray, m: int, n_cls: int, rng: np.random.Generator) -> FrustumBatch:
    return stack_batch(build_frustums(cloud, m, n_cls, rng))


def concat_batches(batches: Sequence[FrustumBatch]) -> FrustumBatch:
    batches = [b for b in batches if len(b)]
    if not batches:
        return stack_batch([])
    if len({b.points.shape[1:] for b in batches}) != 1:
        raise ShapeMismatch("batches differ in frustum size or channel count")
    return FrustumBatch(
        points=np.concatenate([b.points for b in batches]),
        one_hot=np.concatenate([b.one_hot for b in batches]),
        indices=np.concatenate([b.indices for b in batches]),
        origin_counts=np.concatenate([b.origin_counts for b in batches]),
    )
