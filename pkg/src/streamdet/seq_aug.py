"""Stream-consistent augmentation: one random state per stream.

The state is a pure function of ``(base_seed, sequence_id, epoch)``; draws
come from a Philox counter-based generator keyed by a hash of that tuple, so
lanes can derive it independently and in any order.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frames import BH, BL, BW, BX, BY, BYAW, BZ, FrameRecord
from .geometry import AugTransform, FLIP_NONE, FLIP_X, FLIP_Y, Pose, apply_to_points, invert, planar_pose

log = logging.getLogger(__name__)

PASTE_TRACK_BASE = 1_000_000


@dataclass(frozen=True)
class AugRanges:
    flip_prob: float = 0.5
    rotation: float = np.pi / 4
    scale: tuple = (0.95, 1.05)
    translation_std: float = 0.2
    n_paste: int = 0
    paste_radius: tuple = (5.0, 30.0)
    paste_start_max: int = 0

    @classmethod
    def none(cls) -> "AugRanges":
        return cls(flip_prob=0.0, rotation=0.0, scale=(1.0, 1.0), translation_std=0.0)


@dataclass(frozen=True)
class GtPick:
    object_id: int
    placement: Pose
    start_frame: int


@dataclass(frozen=True)
class StreamAugState:
    key: tuple
    aug: AugTransform
    gt_picks: tuple = ()


def stream_key_bits(base_seed: int, sequence_id: str, epoch: int) -> int:
    digest = hashlib.blake2b(f"{base_seed}|{sequence_id}|{epoch}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream_rng(base_seed: int, sequence_id: str, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key_bits(base_seed, sequence_id, epoch)))


def derive_state(base_seed: int, sequence_id: str, epoch: int, ranges: AugRanges = AugRanges(),
                 db_ids=()) -> StreamAugState:
    """Augmentation state for one stream; identical keys give identical states."""
    rng = stream_rng(base_seed, sequence_id, epoch)
    # fixed draw order: flip, axis, rotation, scale, translation, picks
    u_flip, u_axis = rng.random(2)
    flip = FLIP_NONE
    if u_flip < ranges.flip_prob:
        flip = FLIP_X if u_axis < 0.5 else FLIP_Y
    rot = float(rng.uniform(-ranges.rotation, ranges.rotation)) if ranges.rotation > 0 else 0.0
    lo, hi = ranges.scale
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    if ranges.translation_std > 0:
        trans = tuple(float(v) for v in rng.normal(0.0, ranges.translation_std, 3))
    else:
        trans = (0.0, 0.0, 0.0)
    aug = AugTransform(flip, rot, scale, trans)

    picks = []
    ids = sorted(db_ids)
    if ranges.n_paste and ids:
        for _ in range(ranges.n_paste):
            oid = ids[int(rng.integers(len(ids)))]
            r = rng.uniform(*ranges.paste_radius)
            phi, yaw = rng.uniform(-np.pi, np.pi, 2)
            start = -int(rng.integers(ranges.paste_start_max + 1))
            picks.append(GtPick(oid, planar_pose(r * np.cos(phi), r * np.sin(phi), float(yaw)), start))
    return StreamAugState((base_seed, sequence_id, epoch), aug, tuple(picks))


def augment_frame(frame: FrameRecord, state: StreamAugState) -> FrameRecord:
    """Apply the stream's global transform to points and boxes."""
    aug = state.aug
    if aug.is_identity:
        return frame.replace(aug=aug)
    m = aug.matrix
    pts = apply_to_points(m, frame.points)
    boxes = frame.boxes.copy()
    if len(boxes):
        boxes[:, [BX, BY, BZ]] = apply_to_points(m, boxes[:, [BX, BY, BZ]])
        boxes[:, [BW, BL, BH]] *= aug.scale
        boxes[:, BYAW] = aug.map_yaw(boxes[:, BYAW])
    return frame.replace(points=pts, boxes=boxes, aug=aug)


# --- gt database ----------------------------------------------------------

@dataclass
class GtObject:
    """Per-frame object-frame snippets (x, y, z, intensity) and world poses."""

    id: int
    cls: int
    size: tuple
    snippets: list
    poses: list
    source: str = ""

    def __post_init__(self):
        if not self.snippets or len(self.snippets) != len(self.poses):
            raise ValueError(f"object {self.id} needs >= 1 frame with a pose per snippet")

    def frame(self, k: int) -> tuple[np.ndarray, Pose]:
        k = min(max(k, 0), len(self.snippets) - 1)
        return self.snippets[k], self.poses[k]


@dataclass
class GtDatabase:
    objects: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.objects)

    def ids(self) -> list[int]:
        return sorted(self.objects)

    def save(self, root):
        """Directory of per-object f32 snippet blobs plus ``index.json``."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        index = []
        for oid in self.ids():
            o = self.objects[oid]
            blob = np.concatenate([np.asarray(s, "<f4").reshape(-1, 4) for s in o.snippets])
            (root / f"{oid:06d}.bin").write_bytes(blob.tobytes())
            index.append({"id": oid, "class": o.cls, "size": list(o.size), "source": o.source,
                          "counts": [len(s) for s in o.snippets],
                          "poses": [p.matrix.ravel().tolist() for p in o.poses]})
        (root / "index.json").write_text(json.dumps(index))

    @classmethod
    def load(cls, root) -> "GtDatabase":
        root = Path(root)
        objects = {}
        for e in json.loads((root / "index.json").read_text()):
            blob = np.frombuffer((root / f"{e['id']:06d}.bin").read_bytes(), "<f4").reshape(-1, 4)
            cuts = np.cumsum(e["counts"])[:-1]
            snippets = [s.astype(np.float64) for s in np.split(blob, cuts)]
            poses = [Pose(np.array(p).reshape(4, 4)) for p in e["poses"]]
            objects[e["id"]] = GtObject(e["id"], e["class"], tuple(e["size"]), snippets, poses, e.get("source", ""))
        return cls(objects)


def bev_corners(x, y, w, l, yaw) -> np.ndarray:  # noqa: E741
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    return local @ np.array([[c, s], [-s, c]]) + (x, y)


def rotated_iou(a, b) -> float:
    """BEV IoU of two ``(x, y, w, l, yaw)`` boxes."""
    from shapely.geometry import Polygon

    pa, pb = Polygon(bev_corners(*a)), Polygon(bev_corners(*b))
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return float(inter / union) if union > 0 else 0.0


def pasted_object_pose(pick: GtPick, obj: GtObject, frame_offset: int, anchor_pose: Pose) -> tuple[Pose, np.ndarray]:
    """World pose of a pasted object and the snippet shown at ``frame_offset``.

    The object replays its recorded motion relative to its first pose,
    starting from ``pick.placement`` (expressed in the anchor frame, height
    taken from the source object).
    """
    snippet, pose_k = obj.frame(frame_offset - pick.start_frame)
    pose_0 = obj.poses[0]
    place = pick.placement.matrix.copy()
    place[2, 3] = pose_0.translation[2]
    world = anchor_pose.matrix @ place @ invert(pose_0).matrix @ pose_k.matrix
    return Pose(world), snippet


def gt_paste(frame: FrameRecord, db: GtDatabase, state: StreamAugState, frame_offset: int,
             anchor_pose: Pose | None = None, iou_max: float = 0.05) -> FrameRecord:
    """Paste the stream's picked objects into a raw (unaugmented) frame."""
    if not state.gt_picks:
        return frame
    anchor = anchor_pose if anchor_pose is not None else Pose.identity()
    ego_inv = invert(frame.pose)
    existing = [tuple(b[[BX, BY, BW, BL, BYAW]]) for b in frame.boxes]
    new_pts, new_boxes, new_ids = [], [], []
    for k, pick in enumerate(state.gt_picks):
        obj = db.objects[pick.object_id]
        world, snippet = pasted_object_pose(pick, obj, frame_offset, anchor)
        ego_T_obj = ego_inv.matrix @ world.matrix
        cx, cy, cz = ego_T_obj[:3, 3]
        yaw = float(np.arctan2(ego_T_obj[1, 0], ego_T_obj[0, 0]))
        w, l, h = obj.size
        cand = (cx, cy, w, l, yaw)
        if any(rotated_iou(cand, e) > iou_max for e in existing):
            log.debug("paste %d of object %d skipped at frame %d: collision", k, obj.id, frame_offset)
            continue
        existing.append(cand)
        if len(snippet):
            pts = np.c_[apply_to_points(ego_T_obj, snippet[:, :3]), snippet[:, 3], np.zeros(len(snippet))]
            new_pts.append(pts)
        new_boxes.append([cx, cy, cz, w, l, h, yaw, obj.cls])
        new_ids.append(PASTE_TRACK_BASE + k)
    if not new_boxes:
        return frame
    points = np.concatenate([frame.points] + new_pts) if new_pts else frame.points
    boxes = np.concatenate([frame.boxes, np.array(new_boxes)])
    ids = np.concatenate([frame.track_ids, np.array(new_ids, np.int64)])
    return frame.replace(points=points, boxes=boxes, track_ids=ids)


def augment_stream_frame(frame: FrameRecord, state: StreamAugState, db: GtDatabase | None,
                         frame_offset: int, anchor_pose: Pose | None) -> FrameRecord:
    """GtAug (if a database is given) then the global point transformation."""
    if db is not None and state.gt_picks:
        frame = gt_paste(frame, db, state, frame_offset, anchor_pose)
    return augment_frame(frame, state)
