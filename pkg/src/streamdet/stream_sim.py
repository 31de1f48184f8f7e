"""Synthetic LiDAR sequences and their framed binary storage.

On-disk layout of a dataset directory::

    manifest.json          sequences, frame counts, labeling interval, world config
    <sequence_id>.bin      concatenated frame records

Each frame record is little-endian: a 152-byte header (u32 magic ``INTF``,
u32 version, f64 timestamp, 16 f64 pose, u32 n_points, u32 n_boxes), then
``n_points`` x 5 f32, then ``n_boxes`` x (8 f32 + u32 track id), then a CRC32
of everything before it.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .frames import BOX_DIM, FrameRecord
from .geometry import Pose, apply_to_points, invert, planar_pose
from .point_fusion import points_in_boxes
from .seq_sampler import SampleIndex

log = logging.getLogger(__name__)

MAGIC = 0x494E5446
VERSION = 1
HEADER = struct.Struct("<IId16dII")
CRC = struct.Struct("<I")
POINT_DTYPE = np.dtype("<f4")
BOX_DTYPE = np.dtype([("box", "<f4", (BOX_DIM,)), ("track", "<u4")])
MANIFEST = "manifest.json"


class DatasetError(Exception):
    """Base class for dataset I/O failures."""


class FrameFormatError(DatasetError):
    def __init__(self, index: int, message: str):
        super().__init__(f"record {index}: {message}")
        self.index = index


class TruncatedFileError(FrameFormatError):
    pass


class ChecksumError(FrameFormatError):
    pass


class VersionError(FrameFormatError):
    pass


# --- world model ----------------------------------------------------------

@dataclass(frozen=True)
class ObjectSpec:
    """Explicit scene object, world frame, constant velocity."""

    x: float
    y: float
    yaw: float = 0.0
    w: float = 1.0
    l: float = 2.0  # noqa: E741
    h: float = 1.5
    vx: float = 0.0
    vy: float = 0.0
    cls: int = 0


@dataclass(frozen=True)
class WorldConfig:
    n_static: int = 12
    n_moving: int = 4
    n_clutter: int = 8
    speed_range: tuple = (0.5, 3.0)
    size_w: tuple = (0.8, 1.4)
    size_l: tuple = (1.2, 2.4)
    size_h: tuple = (1.0, 1.8)
    clutter_h: tuple = (0.8, 2.0)
    lidar_range: float = 40.0
    points_per_frame: int = 0
    n_ground: int = 1200
    obj_points: int = 40
    angular_resolution: float = 0.0035
    drop_start: float = 8.0
    drop_slope: float = 0.03
    drop_max: float = 0.97
    noise_sigma: float = 0.02
    frame_rate: float = 10.0
    duration: int = 100
    ego_motion: str = "straight"
    ego_speed: float = 5.0
    arc_radius: float = 60.0
    lane_change_amp: float = 3.5
    lane_change_period: float = 6.0
    label_interval: int = 1
    yaw_mode: str = "random"
    min_separation: float = 3.0
    fixed_objects: tuple = ()

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        if self.duration < 0:
            raise ValueError("duration must be non-negative")
        if self.lidar_range <= 0 or self.label_interval < 1:
            raise ValueError("lidar_range and label_interval must be positive")
        for name in ("speed_range", "size_w", "size_l", "size_h", "clutter_h"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (lo, hi) range")
        if self.ego_motion not in ("straight", "arc", "lane-change"):
            raise ValueError(f"unknown ego_motion {self.ego_motion!r}")
        if self.yaw_mode not in ("random", "aligned"):
            raise ValueError(f"unknown yaw_mode {self.yaw_mode!r}")
        if not 0 <= self.drop_max <= 1:
            raise ValueError("drop_max must lie in [0, 1]")

    def dropout(self, r) -> np.ndarray:
        """Probability that a return at horizontal range ``r`` is lost."""
        return np.clip(self.drop_slope * (np.asarray(r, dtype=np.float64) - self.drop_start), 0.0, self.drop_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed_objects"] = [asdict(o) for o in self.fixed_objects]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        d = dict(d)
        for k, v in list(d.items()):
            if isinstance(v, list) and k != "fixed_objects":
                d[k] = tuple(v)
        d["fixed_objects"] = tuple(ObjectSpec(**o) for o in d.get("fixed_objects", ()))
        return cls(**d)


def ego_pose(cfg: WorldConfig, t: float) -> Pose:
    v = cfg.ego_speed
    if cfg.ego_motion == "straight":
        return planar_pose(v * t, 0.0, 0.0)
    if cfg.ego_motion == "arc":
        w = v / cfg.arc_radius
        return planar_pose(cfg.arc_radius * np.sin(w * t), cfg.arc_radius * (1 - np.cos(w * t)), w * t)
    k = 2 * np.pi / cfg.lane_change_period
    y = cfg.lane_change_amp * (1 - np.cos(k * t)) / 2
    dy = cfg.lane_change_amp * k * np.sin(k * t) / 2
    return planar_pose(v * t, y, float(np.arctan2(dy, v)))


def surface_pattern(rng: np.random.Generator, w: float, l: float, h: float, n: int) -> np.ndarray:
    """Fixed ``(n, 4)`` sample of a box's top and side faces, object frame.

    Columns are x (along length), y, z (box-centered) and intensity.
    """
    faces = np.array([l * w, l * h, l * h, w * h, w * h])
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(-0.5, 0.5, n)
    pts = np.empty((n, 4))
    top, side_l, side_r, front, back = (face == k for k in range(5))
    pts[top] = np.c_[u[top] * l, v[top] * w, np.full(top.sum(), h / 2), np.zeros(top.sum())]
    pts[side_l] = np.c_[u[side_l] * l, np.full(side_l.sum(), w / 2), v[side_l] * h, np.zeros(side_l.sum())]
    pts[side_r] = np.c_[u[side_r] * l, np.full(side_r.sum(), -w / 2), v[side_r] * h, np.zeros(side_r.sum())]
    pts[front] = np.c_[np.full(front.sum(), l / 2), u[front] * w, v[front] * h, np.zeros(front.sum())]
    pts[back] = np.c_[np.full(back.sum(), -l / 2), u[back] * w, v[back] * h, np.zeros(back.sum())]
    pts[:, 3] = rng.uniform(0.3, 1.0, n)
    return pts


@dataclass
class _Actor:
    spec: ObjectSpec
    pattern: np.ndarray
    track_id: int
    is_target: bool = True

    def world_pose(self, t: float) -> Pose:
        s = self.spec
        return planar_pose(s.x + s.vx * t, s.y + s.vy * t, s.yaw, s.h / 2)


def _spawn(cfg: WorldConfig, rng: np.random.Generator) -> list[_Actor]:
    poses = [ego_pose(cfg, i / cfg.frame_rate).translation[:2] for i in range(max(cfg.duration, 1))]
    lo = np.min(poses, axis=0) - cfg.lidar_range
    hi = np.max(poses, axis=0) + cfg.lidar_range
    actors: list[_Actor] = []
    placed: list[np.ndarray] = []

    def free_spot():
        for _ in range(200):
            p = rng.uniform(lo, hi)
            near_ego = np.min(np.linalg.norm(np.asarray(poses) - p, axis=1)) < 2.5
            if not near_ego and all(np.linalg.norm(p - q) >= cfg.min_separation for q in placed):
                placed.append(p)
                return p
        p = rng.uniform(lo, hi)
        placed.append(p)
        return p

    for spec in cfg.fixed_objects:
        actors.append(_Actor(spec, surface_pattern(rng, spec.w, spec.l, spec.h, cfg.obj_points), len(actors)))
    for k in range(cfg.n_static + cfg.n_moving):
        x, y = free_spot()
        w, l, h = rng.uniform(*cfg.size_w), rng.uniform(*cfg.size_l), rng.uniform(*cfg.size_h)
        yaw = 0.0 if cfg.yaw_mode == "aligned" else float(rng.uniform(-np.pi, np.pi))
        vx = vy = 0.0
        if k >= cfg.n_static:
            speed = rng.uniform(*cfg.speed_range)
            vx, vy = speed * np.cos(yaw), speed * np.sin(yaw)
        spec = ObjectSpec(float(x), float(y), yaw, w, l, h, vx, vy)
        actors.append(_Actor(spec, surface_pattern(rng, w, l, h, cfg.obj_points), len(actors)))
    for _ in range(cfg.n_clutter):
        x, y = free_spot()
        h = rng.uniform(*cfg.clutter_h)
        spec = ObjectSpec(float(x), float(y), 0.0, 0.3, 0.3, h)
        n = max(cfg.obj_points // 4, 1)
        actors.append(_Actor(spec, surface_pattern(rng, 0.3, 0.3, h, n), -1, is_target=False))
    return actors


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def generate_sequence(cfg: WorldConfig, seed: int, sequence_id: str = "seq0",
                      f32: bool = True) -> list[FrameRecord]:
    """Deterministic synthetic sweep sequence with ground truth.

    Values are rounded to float32 so that a write/read round trip is exact;
    ``f32=False`` keeps full precision for geometric checks.
    """
    cast = _f32 if f32 else np.asarray
    rng = np.random.Generator(np.random.PCG64(seed))
    actors = _spawn(cfg, rng)
    frames = []
    for i in range(cfg.duration):
        t = i / cfg.frame_rate
        ego = ego_pose(cfg, t)
        ego_inv = invert(ego)
        chunks = []
        boxes = []
        tracks = []
        for a in actors:
            ego_T_obj = ego_inv.matrix @ a.world_pose(t).matrix
            p = apply_to_points(ego_T_obj, a.pattern)
            rng_xy = np.hypot(p[:, 0], p[:, 1])
            keep = (rng.random(len(p)) >= cfg.dropout(rng_xy)) & (rng_xy <= cfg.lidar_range)
            if cfg.noise_sigma > 0:
                p[:, :3] += rng.normal(0.0, cfg.noise_sigma, (len(p), 3))
            chunks.append(p[keep])
            if a.is_target:
                center = ego_T_obj[:3, 3]
                if np.hypot(center[0], center[1]) <= cfg.lidar_range:
                    s = a.spec
                    yaw = np.arctan2(ego_T_obj[1, 0], ego_T_obj[0, 0])
                    boxes.append([center[0], center[1], center[2], s.w, s.l, s.h, yaw, s.cls])
                    tracks.append(a.track_id)
        obj_pts = np.concatenate(chunks) if chunks else np.zeros((0, 4))
        if cfg.points_per_frame > 0 and len(obj_pts) > cfg.points_per_frame:
            obj_pts = obj_pts[np.sort(rng.choice(len(obj_pts), cfg.points_per_frame, replace=False))]
        n_ground = cfg.points_per_frame - len(obj_pts) if cfg.points_per_frame > 0 else cfg.n_ground
        ground = _ground(cfg, rng, n_ground, fixed=cfg.points_per_frame > 0)
        pts = np.concatenate([obj_pts, ground])
        pts = np.c_[pts, np.zeros(len(pts))]
        labeled = i % cfg.label_interval == 0
        box_arr = np.array(boxes, dtype=np.float64).reshape(-1, BOX_DIM) if labeled else np.zeros((0, BOX_DIM))
        track_arr = np.array(tracks if labeled else [], dtype=np.int64)
        frames.append(FrameRecord(float(t), ego, cast(pts), cast(box_arr), track_arr, labeled,
                                  sequence_id, i))
    return frames


def _ground(cfg: WorldConfig, rng: np.random.Generator, n: int, fixed: bool) -> np.ndarray:
    if n <= 0:
        return np.zeros((0, 4))
    az = rng.uniform(-np.pi, np.pi, n)
    if cfg.angular_resolution > 0:
        az = np.round(az / cfg.angular_resolution) * cfg.angular_resolution
    r = rng.uniform(2.0, cfg.lidar_range, n)
    if not fixed:
        keep = rng.random(n) >= cfg.dropout(r)
        az, r = az[keep], r[keep]
    z = rng.normal(0.0, max(cfg.noise_sigma, 1e-9), len(r)) if cfg.noise_sigma > 0 else np.zeros(len(r))
    return np.c_[r * np.cos(az), r * np.sin(az), z, rng.uniform(0.0, 0.3, len(r))]


# --- binary records -------------------------------------------------------

def encode_frame(rec: FrameRecord) -> bytes:
    head = HEADER.pack(MAGIC, VERSION, rec.timestamp, *rec.pose.matrix.ravel(),
                       len(rec.points), len(rec.boxes))
    pts = rec.points.astype(POINT_DTYPE).tobytes()
    boxes = np.zeros(len(rec.boxes), BOX_DTYPE)
    boxes["box"] = rec.boxes
    boxes["track"] = rec.track_ids
    body = head + pts + boxes.tobytes()
    return body + CRC.pack(zlib.crc32(body))


def write_sequence(path, frames: Iterable[FrameRecord]) -> int:
    n = 0
    with open(path, "wb") as f:
        for rec in frames:
            f.write(encode_frame(rec))
            n += 1
    return n


class SequenceReader:
    """Streaming reader holding at most one frame's bytes at a time."""

    def __init__(self, path, sequence_id: str = "", label_interval: int = 1):
        self.path = Path(path)
        self.sequence_id = sequence_id
        self.label_interval = label_interval
        self.peak_buffer_bytes = 0

    def __iter__(self) -> Iterator[FrameRecord]:
        with open(self.path, "rb") as f:
            index = 0
            while True:
                head = f.read(HEADER.size)
                if not head:
                    return
                if len(head) < HEADER.size:
                    raise TruncatedFileError(index, "truncated header")
                magic, version, ts, *rest = HEADER.unpack(head)
                if magic != MAGIC:
                    raise FrameFormatError(index, f"bad magic 0x{magic:08x}")
                if version != VERSION:
                    raise VersionError(index, f"unsupported version {version}")
                pose = np.array(rest[:16]).reshape(4, 4)
                n_pts, n_boxes = rest[16], rest[17]
                size = n_pts * 5 * POINT_DTYPE.itemsize + n_boxes * BOX_DTYPE.itemsize
                payload = f.read(size + CRC.size)
                if len(payload) < size + CRC.size:
                    raise TruncatedFileError(index, "truncated payload")
                self.peak_buffer_bytes = max(self.peak_buffer_bytes, len(head) + len(payload))
                (crc,) = CRC.unpack_from(payload, size)
                if zlib.crc32(memoryview(payload)[:size], zlib.crc32(head)) != crc:
                    raise ChecksumError(index, "CRC mismatch")
                pts = np.frombuffer(payload, POINT_DTYPE, n_pts * 5).reshape(n_pts, 5).astype(np.float64)
                boxes = np.frombuffer(payload, BOX_DTYPE, n_boxes, offset=n_pts * 5 * POINT_DTYPE.itemsize)
                yield FrameRecord(ts, Pose(pose), pts, boxes["box"].astype(np.float64),
                                  boxes["track"].astype(np.int64), index % self.label_interval == 0,
                                  self.sequence_id, index)
                del head, payload
                index += 1


def read_sequence(path, sequence_id: str = "", label_interval: int = 1) -> Iterator[FrameRecord]:
    return iter(SequenceReader(path, sequence_id, label_interval))


# --- datasets -------------------------------------------------------------

def generate_dataset(root, cfg: WorldConfig, n_sequences: int, seed: int, prefix: str = "seq") -> "Dataset":
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seqs = []
    for k in range(n_sequences):
        sid = f"{prefix}{k:03d}"
        frames = generate_sequence(cfg, int(np.random.SeedSequence([seed, k]).generate_state(1)[0]), sid)
        write_sequence(root / f"{sid}.bin", frames)
        seqs.append({"id": sid, "file": f"{sid}.bin", "frames": len(frames),
                     "label_interval": cfg.label_interval})
    manifest = {"format": "streamdet", "version": VERSION, "seed": seed,
                "world": cfg.to_dict(), "sequences": seqs}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return Dataset(root)


class Dataset:
    """Manifest-backed collection of sequences with a per-sequence cache."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / MANIFEST
        if not path.exists():
            raise DatasetError(f"no manifest at {path}")
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("version") != VERSION:
            raise DatasetError(f"unsupported dataset version {self.manifest.get('version')}")
        self.sequences = {s["id"]: s for s in self.manifest["sequences"]}
        self._cache: dict[str, list[FrameRecord]] = {}

    @property
    def world(self) -> WorldConfig:
        return WorldConfig.from_dict(self.manifest["world"])

    def stream(self, seq_id: str) -> Iterator[FrameRecord]:
        s = self.sequences[seq_id]
        return read_sequence(self.root / s["file"], seq_id, s["label_interval"])

    def load(self, seq_id: str) -> list[FrameRecord]:
        if seq_id not in self._cache:
            self._cache[seq_id] = list(self.stream(seq_id))
        return self._cache[seq_id]

    def frame(self, seq_id: str, index: int) -> FrameRecord:
        return self.load(seq_id)[index]

    def samples(self) -> list[SampleIndex]:
        out = []
        for sid, s in self.sequences.items():
            for i in range(s["frames"]):
                out.append(SampleIndex(sid, i, i % s["label_interval"] == 0))
        return out

    def stats_csv(self) -> str:
        rows = ["sequence,frames,points,boxes"]
        for sid in self.sequences:
            n = p = b = 0
            for rec in self.stream(sid):
                n += 1
                p += len(rec.points)
                b += len(rec.boxes)
            rows.append(f"{sid},{n},{p},{b}")
        return "\n".join(rows) + "\n"


def build_gt_database(root, slack: float = 0.1):
    """Collect per-track point snippets in object coordinates."""
    from .seq_aug import GtDatabase, GtObject

    ds = Dataset(root) if not isinstance(root, Dataset) else root
    tracks: dict[tuple[str, int], dict] = {}
    for sid in sorted(ds.sequences):
        for rec in ds.stream(sid):
            if not rec.labeled:
                continue
            for box, tid in zip(rec.boxes, rec.track_ids):
                x, y, z, w, l, h, yaw, cls = box
                ego_T_obj = planar_pose(x, y, yaw, z)
                local = apply_to_points(invert(ego_T_obj), rec.points)
                inside = points_in_boxes(local[:, :2], np.array([[0, 0, w, l, 0.0]]), slack)
                inside &= np.abs(local[:, 2]) <= h / 2 + slack
                entry = tracks.setdefault((sid, int(tid)), {"cls": int(cls), "size": (w, l, h),
                                                            "snippets": [], "poses": []})
                entry["snippets"].append(local[inside][:, :4].copy())
                entry["poses"].append(rec.pose @ ego_T_obj)
    if not tracks:
        raise DatasetError("dataset has no labeled boxes")
    objects = {}
    for k, key in enumerate(sorted(tracks)):
        e = tracks[key]
        objects[k] = GtObject(k, e["cls"], tuple(float(v) for v in e["size"]), e["snippets"], e["poses"],
                              source=f"{key[0]}:{key[1]}")
    log.info("gt database: %d objects from %s", len(objects), os.fspath(ds.root))
    return GtDatabase(objects)
