"""Streaming multi-frame BEV detection with a recursively updated memory bank."""

__version__ = "0.1.0"

from .frames import Detection, FrameRecord
from .geometry import AugTransform, Pose, augmented_relative_pose, relative_pose
from .image_fusion import GridSpec, ImageGrid, fuse, warp
from .model import FusionConfig, ToyModel
from .pipeline import Engine, EngineConfig, MemoryBank, TrainConfig, decode_detections, train, voxelize_bev

__all__ = [
    "AugTransform", "Detection", "Engine", "EngineConfig", "FrameRecord", "FusionConfig", "GridSpec", "ImageGrid",
    "MemoryBank", "Pose", "ToyModel", "TrainConfig", "augmented_relative_pose", "decode_detections", "fuse",
    "relative_pose", "train", "voxelize_bev", "warp",
]
