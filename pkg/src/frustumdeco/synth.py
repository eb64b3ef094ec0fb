"""Synthetic scenes and brute-force oracles.

The oracles here re-derive frustum membership and box containment through
separate formulations (explicit homogeneous products, face half-spaces) and
must not call into :mod:`frustumdeco.hidden`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .geom import Box2D, Box3D, box3d_corners
from .kitti_io import FrameBundle, calib_from_kitti, write_frame

# (h, w, l) in meters
CLASS_SIZES = {0: (1.52, 1.62, 3.88), 1: (1.76, 0.66, 0.84), 2: (1.74, 0.60, 1.76)}
LIDAR_HEIGHT = 1.73


@dataclass
class SceneSpec:
    seed: int = 0
    n_objects: int = 4
    class_mix: tuple[float, float, float] = (0.6, 0.2, 0.2)
    size_jitter: float = 0.1
    range_min: float = 8.0
    range_max: float = 35.0
    fg_density: float = 60.0
    bg_density: float = 0.5
    bg_x: tuple[float, float] = (-5.0, 45.0)
    bg_y: tuple[float, float] = (-20.0, 20.0)
    bg_z: tuple[float, float] = (-1.73, 1.0)
    fg_reflectance: tuple[float, float] = (0.0, 1.0)
    bg_reflectance: tuple[float, float] = (0.0, 1.0)
    conf_range: tuple[float, float] = (0.3, 1.0)
    det_sigma: float = 0.0
    n_false_dets: int = 0
    focal: float = 720.0
    cx: float = 620.0
    cy: float = 190.0
    image_w: int = 1242
    image_h: int = 375
    cam_yaw_deg: float = 0.0
    cam_t: tuple[float, float, float] = (0.0, -0.08, -0.27)

    def __post_init__(self):
        if self.fg_density < 0 or self.bg_density < 0:
            raise ValueError("point densities must be non-negative")
        if self.n_objects < 0 or self.n_false_dets < 0:
            raise ValueError("object and false-detection counts must be non-negative")
        if not 0 < self.range_min <= self.range_max:
            raise ValueError("need 0 < range_min <= range_max")

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        types = {f.name: f for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise ValueError(f"bad scene spec line: {line!r}")
            current = getattr(defaults, key)
            if isinstance(current, tuple):
                kwargs[key] = tuple(float(x) for x in value.split(","))
            else:
                kwargs[key] = type(current)(value.strip())
        return cls(**kwargs)

    @classmethod
    def read(cls, path) -> "SceneSpec":
        return cls.from_text(Path(path).read_text())


@dataclass
class SyntheticScene:
    frame: FrameBundle
    membership: np.ndarray  # (N,) index of the GT box holding each point, -1 for none
    det_object: list[int]  # GT object behind each detection, -1 for spurious ones
    clean_detections: list[Box2D]  # before edge noise
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray

    def write(self, root) -> None:
        write_frame(root, self.frame, self.P2, self.R0_rect, self.Tr_velo_to_cam)


def camera_matrices(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    P2 = np.array([[spec.focal, 0.0, spec.cx, 0.0], [0.0, spec.focal, spec.cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    a = math.radians(spec.cam_yaw_deg)
    yaw = np.array([[math.cos(a), math.sin(a), 0.0], [-math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    axes = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    Tr = np.hstack([axes @ yaw, np.asarray(spec.cam_t, dtype=np.float64)[:, None]])
    return P2, np.eye(3), Tr


def _place_objects(spec: SceneSpec, rng: np.random.Generator) -> list[Box3D]:
    half_fov = math.atan2(spec.cx, spec.focal) * 0.75
    yaw0 = math.radians(spec.cam_yaw_deg)
    mix = np.asarray(spec.class_mix, dtype=np.float64)
    boxes: list[Box3D] = []
    attempts = 0
    while len(boxes) < spec.n_objects and attempts < 200 * max(spec.n_objects, 1):
        attempts += 1
        cls = int(rng.choice(len(mix), p=mix / mix.sum()))
        h, w, l = (s * rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter) for s in CLASS_SIZES[cls])
        r = rng.uniform(spec.range_min, spec.range_max)
        bearing = yaw0 + rng.uniform(-half_fov, half_fov)
        x, y = r * math.cos(bearing), r * math.sin(bearing)
        ry = rng.uniform(-math.pi, math.pi)
        cand = Box3D(x, y, -LIDAR_HEIGHT + 0.5 * h, h, w, l, ry, cls=cls)
        radius = 0.5 * math.hypot(l, w)
        if all(math.hypot(b.cx - x, b.cy - y) > radius + 0.5 * math.hypot(b.l, b.w) + 0.3 for b in boxes):
            boxes.append(cand)
    return boxes


def _sample_in_box(b: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    # Keep 1 mm clear of the faces so the float32 cast cannot push a point out.
    half = np.array([b.l, b.w, b.h]) * 0.5 - 1e-3
    local = rng.uniform(-half, half, size=(n, 3))
    c, s = math.cos(b.ry), math.sin(b.ry)
    x = c * local[:, 0] - s * local[:, 1] + b.cx
    y = s * local[:, 0] + c * local[:, 1] + b.cy
    return np.stack([x, y, local[:, 2] + b.cz], axis=1)


def _box_rect(corners: np.ndarray, calib) -> tuple[float, float, float, float] | None:
    hom = np.hstack([corners, np.ones((8, 1))])
    cam = hom @ calib.T.T
    if np.any(cam[:, 2] <= 0):
        return None
    pix = cam @ calib.C.T
    u, v = pix[:, 0] / pix[:, 2], pix[:, 1] / pix[:, 2]
    return float(u.min()), float(v.min()), float(u.max()), float(v.max())


def gen_scene(spec: SceneSpec, frame_id: str | None = None) -> SyntheticScene:
    rng = np.random.default_rng(spec.seed)
    P2, R0, Tr = camera_matrices(spec)
    calib = calib_from_kitti(P2, R0, Tr)
    boxes = _place_objects(spec, rng)

    chunks, refl = [], []
    for b in boxes:
        n = int(round(spec.fg_density * b.h * b.w * b.l))
        chunks.append(_sample_in_box(b, n, rng))
        refl.append(rng.uniform(*spec.fg_reflectance, size=n))
    vol = np.prod([hi - lo for lo, hi in (spec.bg_x, spec.bg_y, spec.bg_z)])
    n_bg = int(round(spec.bg_density * vol))
    lo = [spec.bg_x[0], spec.bg_y[0], spec.bg_z[0]]
    hi = [spec.bg_x[1], spec.bg_y[1], spec.bg_z[1]]
    clutter = rng.uniform(lo, hi, size=(n_bg, 3))
    clutter_refl = rng.uniform(*spec.bg_reflectance, size=n_bg)
    # Clutter occupies free space only.
    free = np.ones(n_bg, dtype=bool)
    for b in boxes:
        free &= ~halfspace_contains(clutter, b)
    chunks.append(clutter[free])
    refl.append(clutter_refl[free])

    xyz = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    r = np.concatenate(refl)
    order = rng.permutation(len(xyz))
    points = np.column_stack([xyz[order], r[order]]).astype(np.float32)

    membership = np.full(len(points), -1, dtype=np.int64)
    for k, b in enumerate(boxes):
        inside = halfspace_contains(points[:, :3].astype(np.float64), b)
        membership[(membership < 0) & inside] = k

    clean, dets, det_object = [], [], []
    for k, b in enumerate(boxes):
        rect = _box_rect(box3d_corners(b), calib)
        if rect is None:
            continue
        conf = float(rng.uniform(*spec.conf_range))
        clean.append(Box2D(*rect, cls=b.cls, conf=conf))
        noisy = np.asarray(rect) + rng.normal(0.0, spec.det_sigma, size=4) if spec.det_sigma > 0 else np.asarray(rect)
        x1, x2 = sorted(noisy[[0, 2]])
        y1, y2 = sorted(noisy[[1, 3]])
        dets.append(Box2D(float(x1), float(y1), float(x2), float(y2), cls=b.cls, conf=conf))
        det_object.append(k)
    for _ in range(spec.n_false_dets):
        u = np.sort(rng.uniform(0, spec.image_w, size=2))
        v = np.sort(rng.uniform(0, spec.image_h, size=2))
        det = Box2D(float(u[0]), float(v[0]), float(u[1]), float(v[1]),
                    cls=int(rng.integers(0, 3)), conf=float(rng.uniform(0.0, 0.2)))
        clean.append(det)
        dets.append(det)
        det_object.append(-1)

    frame = FrameBundle(points, calib, boxes, dets, frame_id or f"{spec.seed:06d}")
    return SyntheticScene(frame, membership, det_object, clean, P2, R0, Tr)


# ------------------------------------------------------------------ oracles

_FACES = ((0, 1, 2, 3), (4, 7, 6, 5), (0, 4, 5, 1), (1, 5, 6, 2), (2, 6, 7, 3), (3, 7, 4, 0))


def _face_planes(b: Box3D) -> list[tuple[np.ndarray, np.ndarray]]:
    corners = box3d_corners(b)
    centroid = corners.mean(axis=0)
    planes = []
    for f in _FACES:
        p0, p1, p2 = corners[f[0]], corners[f[1]], corners[f[2]]
        n = np.cross(p1 - p0, p2 - p0)
        if np.dot(n, centroid - p0) > 0:
            n = -n
        planes.append((n, p0))
    return planes


def halfspace_contains(xyz: np.ndarray, b: Box3D) -> np.ndarray:
    """Vectorized :func:`oracle_contains`."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    inside = np.ones(len(xyz), dtype=bool)
    for n, p0 in _face_planes(b):
        inside &= (xyz - p0) @ n <= 0.0
    return inside


def oracle_contains(p, b: Box3D) -> bool:
    """Containment via signed distances to the six outward face planes."""
    p = np.asarray(p, dtype=np.float64)[:3]
    return all(float(np.dot(n, p - p0)) <= 0.0 for n, p0 in _face_planes(b))


def _oracle_boxes(dets, min_conf, enlarge):
    out = []
    for d in dets:
        if d.conf < min_conf:
            continue
        if enlarge:
            du = (d.x2 - d.x1) * enlarge / 2.0
            dv = (d.y2 - d.y1) * enlarge / 2.0
            d = Box2D(d.x1 - du, d.y1 - dv, d.x2 + du, d.y2 + dv, d.cls, d.conf)
        out.append(d)
    return out


def oracle_recode(frame: FrameBundle, min_conf: float = 0.1, enlarge: float = 0.05,
                  boxes: list[Box2D] | None = None) -> np.ndarray:
    """Naive re-derivation of recoded rows.

    ``boxes`` overrides filtering and enlargement (needed for randomly
    jittered boxes); otherwise detections below ``min_conf`` are dropped and
    the rest grown by ``enlarge`` about their centers.
    """
    if boxes is None:
        boxes = _oracle_boxes(frame.detections, min_conf, enlarge)
    pts = np.asarray(frame.points, dtype=np.float32)
    n_base = pts.shape[1]
    hom = np.hstack([pts[:, :3].astype(np.float64), np.ones((len(pts), 1))])
    rows = []
    for i, det in enumerate(boxes):
        cam = np.einsum("ij,nj->ni", frame.calib.T, hom)
        pix = np.einsum("ij,nj->ni", frame.calib.C, cam)
        front = cam[:, 2] > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = pix[:, 0] / pix[:, 2]
            v = pix[:, 1] / pix[:, 2]
        hit = front & (det.x1 <= u) & (u <= det.x2) & (det.y1 <= v) & (v <= det.y2)
        seg = np.zeros(len(pts), dtype=bool)
        for gt in frame.gt_boxes:
            seg |= halfspace_contains(hom[:, :3], gt)
        for n in np.flatnonzero(hit):
            rows.append(np.concatenate([pts[n], np.array([float(seg[n]), det.cls, i], dtype=np.float32)]))
    if not rows:
        return np.zeros((0, n_base + 3), dtype=np.float32)
    return np.stack(rows).astype(np.float32)


def sorted_rows(rows: np.ndarray) -> np.ndarray:
    """Canonical row order for multiset comparison."""
    rows = np.asarray(rows)
    if len(rows) == 0:
        return rows
    return rows[np.lexsort(rows.T[::-1])]


def multiset_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and np.array_equal(sorted_rows(a), sorted_rows(b))


# ------------------------------------------------------------------ corpora

def random_spec(seed: int, **overrides) -> SceneSpec:
    """A varied scene spec sized for oracle tests (<= 20k points, <= 8 boxes)."""
    rng = np.random.default_rng([seed, 7])
    base = dict(
        seed=seed,
        n_objects=int(rng.integers(0, 9)),
        fg_density=float(rng.uniform(20, 80)),
        bg_density=float(rng.uniform(0.3, 2.0)),
        det_sigma=float(rng.uniform(0, 4)),
        n_false_dets=int(rng.integers(0, 3)),
        cam_yaw_deg=float(rng.uniform(-10, 10)),
    )
    base.update(overrides)
    spec = SceneSpec(**base)
    if spec.n_objects + spec.n_false_dets > 8:
        spec.n_false_dets = max(0, 8 - spec.n_objects)
    return spec


def separable_spec(seed: int, **overrides) -> SceneSpec:
    """Foreground and background separable by reflectance alone."""
    base = dict(seed=seed, n_objects=4, fg_density=40.0, bg_density=2.0,
                fg_reflectance=(0.6, 1.0), bg_reflectance=(0.0, 0.4))
    base.update(overrides)
    return SceneSpec(**base)


def overlapping_spec(seed: int, **overrides) -> SceneSpec:
    """Reflectance only partially informative; detections carry edge noise."""
    base = dict(seed=seed, n_objects=4, fg_density=40.0, bg_density=2.0,
                fg_reflectance=(0.3, 1.0), bg_reflectance=(0.0, 0.7), det_sigma=3.0)
    base.update(overrides)
    return SceneSpec(**base)


def write_corpus(root, specs) -> list[str]:
    ids = []
    for spec in specs:
        scene = gen_scene(spec)
        scene.write(root)
        ids.append(scene.frame.frame_id)
    return ids
