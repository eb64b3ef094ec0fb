"""Readers and writers for KITTI-style frame files and the binary cloud containers.

Container layout (little-endian)::

    8-byte magic | u32 version | u64 row count | u32 channel count | rows of f32

The checkpoint container stores an ordered list of named f32 matrices::

    8-byte magic | u32 version | u32 entry count |
    per entry: u32 name length | utf-8 name | u32 rows | u32 cols | f32 data
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidClass, MalformedFile, MalformedLine, MalformedMatrix, MissingKey
from .geom import Box2D, Box3D, Calib, wrap_angle

RECODED_MAGIC = b"FDRECODE"
DECORATED_MAGIC = b"FDDECOR\x00"
CHECKPOINT_MAGIC = b"FDCKPT\x00\x00"
CONTAINER_VERSION = 1

_HEADER = struct.Struct("<8sIQI")
_CKPT_HEADER = struct.Struct("<8sII")

# Car/Truck/Van merged into one category.
KITTI_CLASSES = {"Car": 0, "Truck": 0, "Van": 0, "Pedestrian": 1, "Cyclist": 2}
CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")


@dataclass
class FrameBundle:
    """One scene: points (N, D) float32, calibration, GT boxes, 2D detections."""

    points: np.ndarray
    calib: Calib
    gt_boxes: list[Box3D] = field(default_factory=list)
    detections: list[Box2D] = field(default_factory=list)
    frame_id: str = ""


# ---------------------------------------------------------------- velodyne

def read_velodyne(path, n_channels: int = 4) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    row_bytes = 4 * n_channels
    if len(raw) % row_bytes:
        raise MalformedFile(f"{path}: length {len(raw)} is not a multiple of {row_bytes}")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, n_channels).astype(np.float32)


def write_velodyne(path, points: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(points, dtype="<f4").tobytes())


# ------------------------------------------------------------------- calib

def _pad4(m: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    out[: m.shape[0], : m.shape[1]] = m
    return out


def _parse_kv(path) -> dict[str, list[str]]:
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    entries = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise MalformedMatrix(f"{path}: line without ':' separator: {line!r}")
        entries[key.strip()] = rest.split()
    return entries


def _matrix(entries, key, shape, path) -> np.ndarray:
    if key not in entries:
        raise MissingKey(f"{path}: missing {key}")
    vals = entries[key]
    if len(vals) != shape[0] * shape[1]:
        raise MalformedMatrix(f"{path}: {key} has {len(vals)} values, expected {shape[0] * shape[1]}")
    try:
        m = np.array([float(v) for v in vals]).reshape(shape)
    except ValueError as exc:
        raise MalformedMatrix(f"{path}: {key}: {exc}") from exc
    if not np.all(np.isfinite(m)):
        raise MalformedMatrix(f"{path}: {key} has non-finite entries")
    return m


def calib_from_kitti(P2, R0_rect, Tr_velo_to_cam) -> Calib:
    """C = P2 and T = pad4(R0_rect) @ pad4(Tr_velo_to_cam)."""
    R0 = np.asarray(R0_rect, dtype=np.float64).reshape(3, 3)
    Tr = np.asarray(Tr_velo_to_cam, dtype=np.float64).reshape(3, 4)
    return Calib(T=_pad4(R0) @ _pad4(Tr), C=np.asarray(P2, dtype=np.float64).reshape(3, 4))


def read_calib(path) -> Calib:
    entries = _parse_kv(path)
    P2 = _matrix(entries, "P2", (3, 4), path)
    R0 = _matrix(entries, "R0_rect", (3, 3), path)
    Tr = _matrix(entries, "Tr_velo_to_cam", (3, 4), path)
    return calib_from_kitti(P2, R0, Tr)


def write_calib(path, P2: np.ndarray, R0_rect: np.ndarray, Tr_velo_to_cam: np.ndarray) -> None:
    def fmt(m):
        return " ".join(repr(float(v)) for v in np.asarray(m, dtype=np.float64).ravel())

    Path(path).write_text(
        f"P2: {fmt(P2)}\nR0_rect: {fmt(R0_rect)}\nTr_velo_to_cam: {fmt(Tr_velo_to_cam)}\n"
    )


# ------------------------------------------------------------------ labels

def _heading_cam(ry: float) -> np.ndarray:
    # Box-local x axis rotated by ry about the camera y axis.
    return np.array([math.cos(ry), 0.0, -math.sin(ry)])


def camera_box_to_lidar(loc, h, w, l, ry, calib: Calib, cls: int = -1) -> Box3D:
    """Camera-frame bottom-anchored label -> LiDAR-frame center-anchored box."""
    center_cam = np.asarray(loc, dtype=np.float64) - (0.0, 0.5 * h, 0.0)
    R, t = calib.T[:3, :3], calib.T[:3, 3]
    center = np.linalg.solve(R, center_cam - t)
    d = np.linalg.solve(R, _heading_cam(ry))
    yaw = wrap_angle(math.atan2(d[1], d[0]))
    return Box3D(*map(float, center), float(h), float(w), float(l), yaw, cls=cls)


def lidar_box_to_camera(b: Box3D, calib: Calib) -> tuple[np.ndarray, float]:
    """Inverse of :func:`camera_box_to_lidar`; returns (bottom-center location, ry)."""
    R, t = calib.T[:3, :3], calib.T[:3, 3]
    loc = R @ b.center + t + (0.0, 0.5 * b.h, 0.0)
    d = R @ np.array([math.cos(b.ry), math.sin(b.ry), 0.0])
    ry = wrap_angle(math.atan2(-d[2], d[0]))
    return loc, ry


def read_labels(path, calib: Calib) -> list[Box3D]:
    try:
        lines = Path(path).read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    boxes = []
    for lineno, line in enumerate(lines, 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise MalformedLine(f"{path}:{lineno}: expected 15 fields, got {len(fields)}")
        if fields[0] == "DontCare":
            continue
        try:
            h, w, l, x, y, z, ry = (float(v) for v in fields[8:15])
        except ValueError as exc:
            raise MalformedLine(f"{path}:{lineno}: {exc}") from exc
        if not (h > 0 and w > 0 and l > 0) or not all(map(math.isfinite, (x, y, z, ry))):
            raise MalformedLine(f"{path}:{lineno}: invalid box dimensions or location")
        boxes.append(camera_box_to_lidar((x, y, z), h, w, l, ry, calib, KITTI_CLASSES.get(fields[0], -1)))
    return boxes


def write_labels(path, boxes: Sequence[Box3D], calib: Calib) -> None:
    lines = []
    for b in boxes:
        name = CLASS_NAMES[b.cls] if 0 <= b.cls < len(CLASS_NAMES) else "Misc"
        loc, ry = lidar_box_to_camera(b, calib)
        vals = [b.h, b.w, b.l, *loc, ry]
        lines.append(f"{name} 0.00 0 0.00 0.00 0.00 0.00 0.00 " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("".join(line + "\n" for line in lines))


# -------------------------------------------------------------- detections

def read_detections(path, n_cls: int = 3) -> list[Box2D]:
    try:
        lines = Path(path).read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    dets = []
    for lineno, line in enumerate(lines, 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 6:
            raise MalformedLine(f"{path}:{lineno}: expected 'cls x1 y1 x2 y2 conf'")
        try:
            cls = int(fields[0])
            x1, y1, x2, y2, conf = (float(v) for v in fields[1:])
        except ValueError as exc:
            raise MalformedLine(f"{path}:{lineno}: {exc}") from exc
        if not 0 <= cls < n_cls:
            raise InvalidClass(f"{path}:{lineno}: class {cls} outside 0..{n_cls - 1}")
        if not (x1 <= x2 and y1 <= y2) or not 0.0 <= conf <= 1.0:
            raise MalformedLine(f"{path}:{lineno}: inverted corners or confidence outside [0, 1]")
        dets.append(Box2D(x1, y1, x2, y2, cls=cls, conf=conf))
    return dets


def write_detections(path, dets: Sequence[Box2D]) -> None:
    Path(path).write_text(
        "".join(f"{d.cls} {d.x1!r} {d.y1!r} {d.x2!r} {d.y2!r} {d.conf!r}\n" for d in dets)
    )


# -------------------------------------------------------------- containers

def _write_container(path, magic: bytes, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError("container payload must be a 2D array")
    header = _HEADER.pack(magic, CONTAINER_VERSION, rows.shape[0], rows.shape[1])
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(rows.tobytes())
    os.replace(tmp, path)


def _read_container(path, magic: bytes) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise MalformedFile(f"{path}: truncated header")
    got_magic, version, count, channels = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise MalformedFile(f"{path}: bad magic {got_magic!r}")
    if version != CONTAINER_VERSION:
        raise MalformedFile(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * count * channels
    if len(raw) != expected:
        raise MalformedFile(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {expected - _HEADER.size}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, channels).astype(np.float32)


def write_recoded(path, rows: np.ndarray) -> None:
    _write_container(path, RECODED_MAGIC, rows)


def read_recoded(path) -> np.ndarray:
    rows = _read_container(path, RECODED_MAGIC)
    if rows.shape[1] < 6:
        raise MalformedFile(f"{path}: recoded cloud needs at least 6 channels, has {rows.shape[1]}")
    return rows


def write_decorated(path, rows: np.ndarray) -> None:
    _write_container(path, DECORATED_MAGIC, rows)


def read_decorated(path) -> np.ndarray:
    return _read_container(path, DECORATED_MAGIC)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named matrices as f32; 1D arrays are stored as single rows."""
    chunks = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CONTAINER_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise ValueError(f"{name}: checkpoint entries must be 1D or 2D")
        key = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(key)) + key + struct.pack("<II", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    try:
        magic, version, count = _CKPT_HEADER.unpack_from(raw)
        if magic != CHECKPOINT_MAGIC:
            raise MalformedFile(f"{path}: bad magic {magic!r}")
        if version != CONTAINER_VERSION:
            raise MalformedFile(f"{path}: unsupported version {version}")
        pos = _CKPT_HEADER.size
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + n].decode("utf-8")
            pos += n
            rows, cols = struct.unpack_from("<II", raw, pos)
            pos += 8
            nbytes = 4 * rows * cols
            if pos + nbytes > len(raw):
                raise MalformedFile(f"{path}: truncated entry {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if pos != len(raw):
        raise MalformedFile(f"{path}: {len(raw) - pos} trailing bytes")
    return out


# ------------------------------------------------------------------ frames

FRAME_DIRS = {"velodyne": ".bin", "calib": ".txt", "label_2": ".txt", "detections": ".txt"}


def frame_paths(root, frame_id: str) -> dict[str, Path]:
    root = Path(root)
    return {sub: root / sub / f"{frame_id}{ext}" for sub, ext in FRAME_DIRS.items()}


def read_frame(root, frame_id: str, n_cls: int = 3, require_labels: bool = True) -> FrameBundle:
    paths = frame_paths(root, frame_id)
    calib = read_calib(paths["calib"])
    points = read_velodyne(paths["velodyne"])
    if paths["label_2"].exists():
        gt = read_labels(paths["label_2"], calib)
    elif require_labels:
        raise MalformedFile(f"{paths['label_2']}: missing label file")
    else:
        gt = []
    dets = read_detections(paths["detections"], n_cls=n_cls)
    return FrameBundle(points=points, calib=calib, gt_boxes=gt, detections=dets, frame_id=frame_id)


def write_frame(root, frame: FrameBundle, P2, R0_rect, Tr_velo_to_cam) -> None:
    """Write a frame in the directory layout read by :func:`read_frame`.

    The raw calibration matrices are passed explicitly since ``Calib`` only
    keeps their product.
    """
    paths = frame_paths(root, frame.frame_id)
    for p in paths.values():
        p.parent.mkdir(parents=True, exist_ok=True)
    write_velodyne(paths["velodyne"], frame.points)
    write_calib(paths["calib"], P2, R0_rect, Tr_velo_to_cam)
    write_labels(paths["label_2"], frame.gt_boxes, frame.calib)
    write_detections(paths["detections"], frame.detections)
