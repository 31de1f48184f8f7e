"""Shared record types: LiDAR frames and BEV detections."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import AugTransform, Pose

# box columns: x, y, z, w, l, h, yaw, class
BOX_DIM = 8
BX, BY, BZ, BW, BL, BH, BYAW, BCLS = range(8)


@dataclass(frozen=True)
class Detection:
    """BEV box; ``l`` runs along ``yaw`` and ``w`` across it."""

    x: float
    y: float
    w: float
    l: float  # noqa: E741
    yaw: float
    score: float
    cls: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError("box sizes must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")

    def as_row(self) -> tuple:
        return (self.x, self.y, self.w, self.l, self.yaw)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "l": self.l, "yaw": self.yaw,
                "score": self.score, "cls": self.cls}


@dataclass(eq=False)
class FrameRecord:
    """One sweep: points ``(N, 5)`` in ego coordinates and gt boxes ``(M, 8)``.

    ``aug`` marks frames that went through a global augmentation, so the
    engine knows to use the conjugated relative pose.
    """

    timestamp: float
    pose: Pose
    points: np.ndarray
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, BOX_DIM)))
    track_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    labeled: bool = True
    sequence_id: str = ""
    frame_index: int = 0
    aug: AugTransform | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 5)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, BOX_DIM)
        self.track_ids = np.asarray(self.track_ids, dtype=np.int64).reshape(-1)
        if len(self.track_ids) != len(self.boxes):
            raise ValueError("one track id per box required")

    def replace(self, **changes) -> "FrameRecord":
        return replace(self, **changes)

    def gt_detections(self) -> list[Detection]:
        return [Detection(b[BX], b[BY], b[BW], b[BL], b[BYAW], 1.0, int(b[BCLS])) for b in self.boxes]

    def same_as(self, other: "FrameRecord") -> bool:
        return (self.timestamp == other.timestamp
                and np.array_equal(self.pose.matrix, other.pose.matrix)
                and self.points.tobytes() == other.points.tobytes()
                and self.boxes.tobytes() == other.boxes.tobytes()
                and np.array_equal(self.track_ids, other.track_ids)
                and self.labeled == other.labeled)
