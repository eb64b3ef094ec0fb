"""Verification suite behind ``frustumdeco check``.

Each check yields ``(name, status, measured, tolerance)`` and passes iff
``measured <= tolerance``.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .frustum import FrustumBatch
from .geom import Box3D, Calib, box3d_local, points_in_box3d, project_points
from .gradcheck import TOLERANCE, check_model_loss, check_primitive, make_check_batch
from .hidden import RecodeOpts, recode_frame
from .kitti_io import calib_from_kitti
from .seen_net import SeenConfig, SeenModel
from .synth import camera_matrices, gen_scene, halfspace_contains, multiset_equal, oracle_recode, random_spec

Row = tuple[str, str, float, float]


def random_box(rng: np.random.Generator) -> Box3D:
    return Box3D(*rng.uniform(-20, 20, size=3), *rng.uniform(0.5, 5.0, size=3), float(rng.uniform(-math.pi, math.pi)))


def random_pairs(rng: np.random.Generator, n: int) -> tuple[list[Box3D], np.ndarray]:
    boxes = [random_box(rng) for _ in range(n)]
    pts = np.array([b.center for b in boxes]) + rng.uniform(-3.0, 3.0, size=(n, 3))
    return boxes, pts


def box_disagreements(rng: np.random.Generator, n: int = 10_000) -> int:
    boxes, pts = random_pairs(rng, n)
    return sum(
        bool(points_in_box3d(p, b)[0]) != bool(halfspace_contains(p, b)[0]) for b, p in zip(boxes, pts)
    )


def projection_scale_deviation(rng: np.random.Generator, n_calibs: int = 20, n_pts: int = 200) -> float:
    worst = 0.0
    for _ in range(n_calibs):
        calib = calib_from_kitti(*camera_matrices(random_spec(int(rng.integers(1 << 30)))))
        pts = rng.uniform([2, -10, -2], [50, 10, 2], size=(n_pts, 3))
        uv, front = project_points(calib, pts)
        s = float(rng.uniform(0.01, 100.0))
        uv2, front2 = project_points(Calib(calib.T, calib.C * s), pts)
        assert np.array_equal(front, front2)
        worst = max(worst, float(np.max(np.abs(uv[front] - uv2[front]), initial=0.0)))
    return worst


def rigid_motion_deviation(rng: np.random.Generator, n: int = 2000) -> tuple[float, int]:
    """Max change of box-local coordinates, and containment flips away from faces."""
    worst, flips = 0.0, 0
    boxes, pts = random_pairs(rng, n)
    for b, p in zip(boxes, pts):
        a = float(rng.uniform(-math.pi, math.pi))
        t = rng.uniform(-50, 50, size=3)
        R = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
        b2 = Box3D(*(R @ b.center + t), b.h, b.w, b.l, b.ry + a)
        p2 = R @ p + t
        loc, loc2 = box3d_local(p, b)[0], box3d_local(p2, b2)[0]
        worst = max(worst, float(np.max(np.abs(loc - loc2))))
        margin = np.min(np.array([b.l, b.w, b.h]) * 0.5 - np.abs(loc))
        if abs(margin) > 1e-9 and points_in_box3d(p, b)[0] != points_in_box3d(p2, b2)[0]:
            flips += 1
    return worst, flips


def oracle_mismatches(seed: int, n_scenes: int) -> tuple[int, int]:
    """(scenes whose recoding differs from the oracle, rows with the wrong width)."""
    bad = width_bad = 0
    for k in range(n_scenes):
        frame = gen_scene(random_spec(seed * 1000 + k)).frame
        cloud = recode_frame(frame, RecodeOpts(jitter="infer"))
        bad += not multiset_equal(cloud.points, oracle_recode(frame))
        width_bad += cloud.points.shape[1] != frame.points.shape[1] + 3
    return bad, width_bad


def permutation_deviation(rng: np.random.Generator, n_perms: int, variant: str = "D") -> float:
    """Max |difference| between permuted outputs and outputs of the permuted input."""
    model = SeenModel.init(SeenConfig(variant=variant), seed=int(rng.integers(1 << 30)))
    batch = make_check_batch(rng, B=3, m=32)
    base = model.forward(batch)
    B, m = batch.points.shape[:2]
    worst = 0.0
    for _ in range(n_perms):
        perm = np.stack([rng.permutation(m) for _ in range(B)])
        pts = np.take_along_axis(batch.points, perm[:, :, None], axis=1)
        out = model.forward(FrustumBatch(pts, batch.one_hot, batch.indices, batch.origin_counts))
        rows = (perm + np.arange(B)[:, None] * m).ravel()
        for a, b in ((base.logits, out.logits), (base.seg_feat, out.seg_feat), (base.decoration, out.decoration)):
            worst = max(worst, float(np.max(np.abs(a.value[rows] - b.value))))
        worst = max(worst, float(np.max(np.abs(base.global_feat.value - out.global_feat.value))))
    return worst


def _row(name: str, measured: float, tol: float) -> Row:
    return (name, "pass" if measured <= tol else "fail", float(measured), float(tol))


def run_checks(seed: int = 0, n_scenes: int = 10, draws: int = 10, n_pairs: int = 10_000) -> Iterator[Row]:
    rng = np.random.default_rng(seed)
    yield _row("geom.box3d_vs_halfspace_disagreements", box_disagreements(rng, n_pairs), 0)
    yield _row("geom.projection_scale_invariance", projection_scale_deviation(rng), 1e-9)
    dev, flips = rigid_motion_deviation(rng)
    yield _row("geom.rigid_motion_local_coords", dev, 1e-9)
    yield _row("geom.rigid_motion_containment_flips", flips, 0)
    bad, width_bad = oracle_mismatches(seed, n_scenes)
    yield _row("hidden.oracle_mismatched_scenes", bad, 0)
    yield _row("hidden.width_contract_violations", width_bad, 0)
    for name in ad.PRIMITIVES:
        err = max(check_primitive(name, np.random.default_rng([seed, k])) for k in range(draws))
        yield _row(f"grad.{name}", err, TOLERANCE)
    stats: dict[str, int] = {}
    err = max(max(check_model_loss(np.random.default_rng([seed, 99, k]), stats=stats).values()) for k in range(draws))
    yield _row("grad.full_loss_D", err, TOLERANCE)
    skipped = stats.get("skipped", 0) / max(stats.get("skipped", 0) + stats.get("checked", 0), 1)
    yield _row("grad.full_loss_D_kink_skip_fraction", skipped, 0.05)
    yield _row("net.permutation_deviation", permutation_deviation(rng, 10 * draws), 0.0)
