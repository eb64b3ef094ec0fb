"""Frustum point recoding and learned point decoration for LiDAR 3D detection."""

from .errors import FrustumDecoError
from .geom import Box2D, Box3D, Calib
from .hidden import RecodedCloud, RecodeOpts, recode_frame
from .kitti_io import FrameBundle
from .seen_net import SeenConfig, SeenModel, TrainConfig, decorate_cloud, train

__version__ = "0.1.0"

__all__ = [
    "Box2D", "Box3D", "Calib", "FrameBundle", "FrustumDecoError", "RecodedCloud", "RecodeOpts",
    "SeenConfig", "SeenModel", "TrainConfig", "decorate_cloud", "recode_frame", "train",
]
