"""Point-style memory bank: a fixed-capacity FIFO of past foreground points.

Point sets are ``(N, 5)`` float64 arrays with columns
``x, y, z, intensity, dt``; ``dt`` is seconds relative to the frame the set
is expressed in (0 for the current sweep, negative for the past).
"""

from __future__ import annotations

import io

import numpy as np

from .geometry import AugTransform, Pose, apply_to_points, augmented_relative_pose, relative_pose

POINT_DIM = 5
DEFAULT_CAPACITY = 50_000
DT_FLOOR = -10.0
X, Y, Z, INTENSITY, DT = range(5)


def empty_points() -> np.ndarray:
    return np.zeros((0, POINT_DIM))


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != POINT_DIM:
        raise ValueError(f"point sets must be (N, {POINT_DIM}), got {pts.shape}")
    return pts


class PointMB:
    """FIFO of timestamped points expressed in the frame of ``last_pose``.

    Storage is preallocated to ``capacity`` rows and kept contiguous,
    oldest first, so the resident size never depends on stream length.
    Eviction is per point.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self._pts = np.zeros((self.capacity, POINT_DIM))
        self._src_time = np.zeros(self.capacity)
        self._size = 0
        self.last_pose = Pose.identity()
        self.last_time = -np.inf
        self.last_aug: AugTransform | None = None

    def __len__(self):
        return self._size

    @property
    def points(self) -> np.ndarray:
        """Read-only view of stored points, oldest first."""
        view = self._pts[: self._size]
        view.flags.writeable = False
        return view

    @property
    def source_times(self) -> np.ndarray:
        view = self._src_time[: self._size]
        view.flags.writeable = False
        return view

    @property
    def nbytes(self) -> int:
        return self._pts.nbytes + self._src_time.nbytes

    def clear(self):
        self._size = 0
        self.last_pose = Pose.identity()
        self.last_time = -np.inf
        self.last_aug = None

    def align_to(self, pose_cur: Pose, time_cur: float, aug: AugTransform | None = None) -> "PointMB":
        """Re-express the bank in the current frame; recompute ``dt``.

        With ``aug`` the frames are assumed augmented by the same transform
        and the relative pose is conjugated accordingly.
        """
        if time_cur < self.last_time:
            raise ValueError(f"time went backwards: {time_cur} < {self.last_time}")
        if self._size:
            if aug is None or aug.is_identity:
                t_rel = relative_pose(pose_cur, self.last_pose)
            else:
                t_rel = augmented_relative_pose(pose_cur, self.last_pose, aug)
            live = self._pts[: self._size]
            live[:, :3] = apply_to_points(t_rel, live[:, :3])
            live[:, DT] = np.maximum(self._src_time[: self._size] - time_cur, DT_FLOOR)
        self.last_pose = pose_cur
        self.last_time = float(time_cur)
        self.last_aug = aug
        return self

    def push(self, pts: np.ndarray, source_time: float | None = None):
        """Append points (already in the bank's frame); evict oldest beyond capacity."""
        pts = as_points(pts)
        n = pts.shape[0]
        if n == 0 or self.capacity == 0:
            return
        t = self.last_time if source_time is None else float(source_time)
        if not np.isfinite(t):
            t = 0.0
        if n >= self.capacity:
            pts = pts[n - self.capacity:]
            n = self.capacity
            keep = 0
        else:
            keep = min(self._size, self.capacity - n)
            if keep < self._size:
                self._pts[:keep] = self._pts[self._size - keep: self._size]
                self._src_time[:keep] = self._src_time[self._size - keep: self._size]
        new = slice(keep, keep + n)
        self._pts[new] = pts
        self._src_time[new] = t
        ref = self.last_time if np.isfinite(self.last_time) else t
        self._pts[new, DT] = max(t - ref, DT_FLOOR)
        self._size = keep + n

    def snapshot(self) -> dict:
        return {
            "capacity": self.capacity,
            "points": self.points.copy(),
            "source_times": self.source_times.copy(),
            "last_pose": self.last_pose.matrix.copy(),
            "last_time": self.last_time,
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "PointMB":
        mb = cls(int(snap["capacity"]))
        n = len(snap["points"])
        mb._pts[:n] = snap["points"]
        mb._src_time[:n] = snap["source_times"]
        mb._size = n
        mb.last_pose = Pose(snap["last_pose"])
        mb.last_time = float(snap["last_time"])
        return mb

    def to_csv(self) -> str:
        return points_to_csv(self.points)


def align_to(mb: PointMB, pose_cur: Pose, time_cur: float, aug: AugTransform | None = None) -> PointMB:
    return mb.align_to(pose_cur, time_cur, aug)


def push_foreground(mb: PointMB, pts: np.ndarray, source_time: float | None = None):
    mb.push(pts, source_time)


def fuse_points(p_cur: np.ndarray, mb: PointMB) -> np.ndarray:
    """Concatenate current points (dt forced to 0) with the aligned bank."""
    cur = as_points(p_cur).copy()
    cur[:, DT] = 0.0
    if len(mb) == 0:
        return cur
    return np.concatenate([cur, mb.points])


def points_in_boxes(xy: np.ndarray, boxes: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Boolean (N,) mask of BEV points inside any rotated box.

    ``boxes`` is (M, 5): ``cx, cy, w, l, yaw`` where ``l`` runs along the
    heading and ``w`` across it.
    """
    xy = np.asarray(xy, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    inside = np.zeros(len(xy), dtype=bool)
    for cx, cy, w, l, yaw in boxes:
        c, s = np.cos(yaw), np.sin(yaw)
        dx = xy[:, 0] - cx
        dy = xy[:, 1] - cy
        along = c * dx + s * dy
        across = -s * dx + c * dy
        inside |= (np.abs(along) <= l / 2 + margin) & (np.abs(across) <= w / 2 + margin)
    return inside


def select_foreground(pts: np.ndarray, dets, score_min: float = 0.3, margin: float = 0.1) -> np.ndarray:
    """Points falling inside any detection scoring at least ``score_min``."""
    pts = as_points(pts)
    boxes = [(d.x, d.y, d.w, d.l, d.yaw) for d in dets if d.score >= score_min]
    if not boxes:
        return empty_points()
    return pts[points_in_boxes(pts[:, :2], np.array(boxes), margin)]


def points_to_csv(points: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write("x,y,z,intensity,dt\n")
    np.savetxt(buf, np.asarray(points).reshape(-1, POINT_DIM), delimiter=",", fmt="%.9g")
    return buf.getvalue()
