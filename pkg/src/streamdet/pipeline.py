"""The streaming engine: a single-frame BEV detector wrapped with a memory bank.

Per frame the engine (1) aligns the point bank and fuses it with the sweep,
(2) voxelizes, (3) warps and fuses feature-map history, (4) runs the trunk,
(5) warps and fuses prediction-map history, (6) decodes boxes and (7) pushes
foreground points back into the bank.  Every past frame is visited exactly
once; its contribution survives only through the bank.
"""

from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .frames import Detection, FrameRecord
from .geometry import Pose, augmented_relative_pose, relative_pose
from .image_fusion import MAX, GridSpec, ImageGrid, warp
from .model import (C_IN, C_PM, LOG_SIZE_CLIP, FrameInputs, LossConfig, ToyModel, backward_frame, build_targets,
                    detection_loss, run_frame, sigmoid)
from .point_fusion import DEFAULT_CAPACITY, DT, INTENSITY, PointMB, fuse_points, select_foreground

log = logging.getLogger(__name__)

DENSITY_REF = 16.0
STAGES = ("align", "voxelize", "fuse", "trunk", "decode")


# --- voxelization ---------------------------------------------------------

def voxelize_bev(points: np.ndarray, spec: GridSpec) -> ImageGrid:
    """Pillar-style scatter of ``(N, 5)`` points into the 6-channel BEV contract.

    Channels: occupancy, log-density ``log1p(n) / log1p(16)``, mean z, max z,
    mean intensity, mean dt.  Points outside the grid are dropped.
    """
    spec = spec.with_channels(C_IN)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    h, w = spec.height, spec.width
    inside = spec.contains(pts[:, 0], pts[:, 1])
    pts = pts[inside]
    data = np.zeros(spec.shape)
    if len(pts) == 0:
        return ImageGrid(spec, data)
    row, col = spec.cell_of(pts[:, 0], pts[:, 1])
    # guard against x == x_max - tiny round-off landing one past the edge
    row = np.minimum(row, h - 1)
    col = np.minimum(col, w - 1)
    flat = row * w + col
    n = h * w
    count = np.bincount(flat, minlength=n)
    occ = count > 0
    safe = np.maximum(count, 1)
    zmax = np.full(n, -np.inf)
    np.maximum.at(zmax, flat, pts[:, 2])
    data[0] = occ.reshape(h, w)
    data[1] = (np.log1p(count) / np.log1p(DENSITY_REF)).reshape(h, w)
    data[2] = (np.bincount(flat, pts[:, 2], n) / safe).reshape(h, w)
    data[3] = np.where(occ, zmax, 0.0).reshape(h, w)
    data[4] = (np.bincount(flat, pts[:, INTENSITY], n) / safe).reshape(h, w)
    data[5] = (np.bincount(flat, pts[:, DT], n) / safe).reshape(h, w)
    return ImageGrid(spec, data, occ.reshape(h, w).astype(np.uint8), count.reshape(h, w))


# --- grid-level forward and decoding --------------------------------------

def forward(model: ToyModel, grid_after_fm_fusion: ImageGrid) -> tuple[ImageGrid, ImageGrid]:
    """Trunk and heads on an FM-fused grid: ``(heat, reg)`` grids."""
    from .model import forward as forward_arrays

    spec = grid_after_fm_fusion.spec
    if spec.channels != C_IN:
        raise ValueError(f"expected {C_IN} channels, got {spec.channels}")
    heat, reg = forward_arrays(model, grid_after_fm_fusion.data)
    return ImageGrid.dense(spec.with_channels(1), heat), ImageGrid.dense(spec.with_channels(4), reg)


def decode_detections(heat: ImageGrid, reg: ImageGrid, score_min: float = 0.1, nms_radius: float = 1.5,
                      max_candidates: int = 200) -> list[Detection]:
    """Peaks of the heat map turned into boxes, highest score first.

    A cell is a candidate if it is a maximum over its 3x3 neighborhood and
    scores at least ``score_min``.  Greedy suppression then drops any
    candidate within ``nms_radius`` meters of an already kept one.
    """
    spec = heat.spec
    hm = heat.data[0]
    padded = np.pad(hm, 1, constant_values=-np.inf)
    local_max = sliding_window_view(padded, (3, 3)).max(axis=(2, 3))
    rows, cols = np.nonzero((hm >= local_max) & (hm >= score_min))
    if len(rows) == 0:
        return []
    scores = hm[rows, cols]
    order = np.lexsort((cols, rows, -scores))[:max_candidates]
    rows, cols, scores = rows[order], cols[order], scores[order]
    xs, ys = spec.center_of(rows, cols)
    near = np.hypot(xs[:, None] - xs[None, :], ys[:, None] - ys[None, :]) <= nms_radius
    alive = np.ones(len(rows), dtype=bool)
    kept = []
    for i in range(len(rows)):
        if alive[i]:
            kept.append(i)
            alive &= ~near[i]
    kept = np.array(kept)
    lw, ll, s, c = reg.data[:, rows[kept], cols[kept]]
    w = np.exp(np.clip(lw, -LOG_SIZE_CLIP, LOG_SIZE_CLIP))
    ln = np.exp(np.clip(ll, -LOG_SIZE_CLIP, LOG_SIZE_CLIP))
    yaw = np.arctan2(s, c)
    sc = np.clip(scores[kept], 0.0, 1.0)
    return [Detection(float(a), float(b), float(e), float(f), float(g), float(h))
            for a, b, e, f, g, h in zip(xs[kept], ys[kept], w, ln, yaw, sc)]


# --- memory bank ----------------------------------------------------------

class MemoryBank:
    """Point queue plus feature-map and prediction-map history grids."""

    def __init__(self, fm_spec: GridSpec, pm_spec: GridSpec, capacity: int = DEFAULT_CAPACITY):
        self.point = PointMB(capacity)
        self.fm = ImageGrid.zeros(fm_spec)
        self.pm = ImageGrid.zeros(pm_spec)
        self.gru_state = None
        self.last_pose = Pose.identity()
        self.last_time = -np.inf
        self.primed = False

    def clear(self):
        self.point.clear()
        for g in (self.fm, self.pm):
            g.data[...] = 0.0
            g.mask[...] = 0
            g.count[...] = 0
        self.last_pose = Pose.identity()
        self.last_time = -np.inf
        self.primed = False

    @property
    def is_clear(self) -> bool:
        return (not self.primed and len(self.point) == 0
                and not self.fm.data.any() and not self.fm.mask.any()
                and not self.pm.data.any() and not self.pm.mask.any())

    @property
    def nbytes(self) -> int:
        return self.point.nbytes + self.fm.nbytes + self.pm.nbytes

    def snapshot(self) -> bytes:
        """Serialized bank state (``np.savez``) for replay."""
        snap = self.point.snapshot()
        arrays = {f"point_{k}": np.asarray(v) for k, v in snap.items()}
        for name, g in (("fm", self.fm), ("pm", self.pm)):
            arrays[f"{name}_data"] = g.data
            arrays[f"{name}_mask"] = g.mask
            arrays[f"{name}_count"] = g.count
        arrays["last_pose"] = self.last_pose.matrix
        arrays["last_time"] = np.array(self.last_time)
        arrays["primed"] = np.array(self.primed)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    def restore(self, blob: bytes):
        z = np.load(io.BytesIO(blob))
        snap = {k[len("point_"):]: z[k] for k in z.files if k.startswith("point_")}
        self.point = PointMB.from_snapshot(snap)
        for name in ("fm", "pm"):
            g = getattr(self, name)
            g.data[...] = z[f"{name}_data"]
            g.mask[...] = z[f"{name}_mask"]
            g.count[...] = z[f"{name}_count"]
        self.last_pose = Pose(z["last_pose"])
        self.last_time = float(z["last_time"])
        self.primed = bool(z["primed"])


# --- engine ---------------------------------------------------------------

@dataclass(frozen=True)
class EngineConfig:
    score_min: float = 0.1
    nms_radius: float = 1.5
    fg_score_min: float = 0.3
    fg_margin: float = 0.2
    capacity: int = DEFAULT_CAPACITY
    gt_foreground: bool = False


@dataclass
class StepResult:
    detections: list
    inputs: FrameInputs
    g: np.ndarray
    cache: dict | None
    points_voxelized: int


def _merge_aux(mode: str, cur: ImageGrid, hist: ImageGrid) -> tuple[np.ndarray, np.ndarray]:
    mask = (cur.mask | hist.mask).astype(np.uint8)
    count = np.maximum(cur.count, hist.count) if mode == MAX else cur.count + hist.count
    return mask, count


class Engine:
    """One lane of streaming inference (or training) around a shared model."""

    def __init__(self, model: ToyModel, spec: GridSpec, cfg: EngineConfig = EngineConfig()):
        self.model = model
        self.cfg = cfg
        self.fm_spec = spec.with_channels(C_IN)
        self.pm_spec = spec.with_channels(C_PM)
        self.bank = MemoryBank(self.fm_spec, self.pm_spec, cfg.capacity)
        self.frames_seen = 0
        self.points_voxelized = 0
        self.total_points_voxelized = 0
        self.stage_ns = dict.fromkeys(STAGES, 0)

    @property
    def resident_bytes(self) -> int:
        return self.bank.nbytes

    def reset(self):
        self.bank.clear()

    def step(self, frame: FrameRecord, reset: bool = False) -> list[Detection]:
        return self.advance(frame, reset).detections

    def advance(self, frame: FrameRecord, reset: bool = False, keep_cache: bool = False,
                decode: bool = True) -> StepResult:
        """Process one frame; returns detections plus what training needs.

        ``decode=False`` skips box decoding when nothing consumes the boxes
        (training without point fusion, or with ground-truth foreground).
        """
        fz = self.model.fusion
        bank = self.bank
        cfg = self.cfg
        clock = time.perf_counter_ns
        t0 = clock()
        if reset:
            bank.clear()
        if bank.primed and not frame.timestamp > bank.last_time:
            raise ValueError(f"non-monotonic timestamp {frame.timestamp} after {bank.last_time}")
        t_rel = None
        if bank.primed:
            aug = frame.aug
            if aug is None or aug.is_identity:
                t_rel = relative_pose(frame.pose, bank.last_pose)
            else:
                t_rel = augmented_relative_pose(frame.pose, bank.last_pose, aug)

        # (1) point-cloud fusion
        if fz.pc:
            bank.point.align_to(frame.pose, frame.timestamp, frame.aug)
            pts = fuse_points(frame.points, bank.point)
        else:
            pts = frame.points.copy()
            pts[:, DT] = 0.0
        t1 = clock()

        # (2) voxelize
        x = voxelize_bev(pts, self.fm_spec)
        n_vox = len(pts)
        t2 = clock()

        # (3) feature-map history
        inp = FrameInputs(x.data, x.mask)
        fm_hist = pm_hist = None
        if fz.fm is not None and t_rel is not None:
            fm_hist = warp(bank.fm, t_rel)
            inp.fm_hist, inp.fm_hist_mask = fm_hist.data, fm_hist.mask
        if fz.pm is not None and t_rel is not None:
            pm_hist = warp(bank.pm, t_rel)
            inp.pm_hist, inp.pm_hist_mask = pm_hist.data, pm_hist.mask
        t3 = clock()

        # (4)+(5) trunk, heads and prediction-map fusion
        f, _, g, cache = run_frame(self.model, inp, keep_cache=keep_cache)
        t4 = clock()

        # store back (detached copies)
        if fz.fm is not None:
            hist = fm_hist if fm_hist is not None else ImageGrid.zeros(self.fm_spec)
            mask, count = _merge_aux(fz.fm, x, hist)
            bank.fm = ImageGrid(self.fm_spec, f.copy(), mask, count)
        if fz.pm is not None:
            bank.pm = ImageGrid.dense(self.pm_spec, g.copy())

        # (6) decode, (7) foreground back into the point bank
        dets = []
        if decode or (fz.pc and not cfg.gt_foreground):
            heat = ImageGrid.dense(self.pm_spec.with_channels(1), sigmoid(g[:1]))
            reg = ImageGrid.dense(self.pm_spec.with_channels(4), g[1:])
            dets = decode_detections(heat, reg, cfg.score_min, cfg.nms_radius)
        if fz.pc:
            source = frame.gt_detections() if cfg.gt_foreground else dets
            fg = select_foreground(frame.points, source, cfg.fg_score_min, cfg.fg_margin)
            bank.point.push(fg, frame.timestamp)
        bank.last_pose = frame.pose
        bank.last_time = float(frame.timestamp)
        bank.primed = True
        t5 = clock()

        for name, dt in zip(STAGES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4)):
            self.stage_ns[name] = dt
        self.frames_seen += 1
        self.points_voxelized = n_vox
        self.total_points_voxelized += n_vox
        return StepResult(dets, inp, g, cache, n_vox)


def single_frame_detect(model: ToyModel, spec: GridSpec, frame: FrameRecord,
                        cfg: EngineConfig = EngineConfig()) -> list[Detection]:
    """The bare detector: same network with no history at all."""
    pts = frame.points.copy()
    pts[:, DT] = 0.0
    x = voxelize_bev(pts, spec)
    _, _, g, _ = run_frame(model, FrameInputs(x.data, x.mask))
    pm_spec = spec.with_channels(C_PM)
    heat = ImageGrid.dense(pm_spec.with_channels(1), sigmoid(g[:1]))
    reg = ImageGrid.dense(pm_spec.with_channels(4), g[1:])
    return decode_detections(heat, reg, cfg.score_min, cfg.nms_radius)


def run_stream(engine: Engine, frames, reset_every: int = 0) -> list[list[Detection]]:
    """Step through ``frames`` in order; resets at sequence changes.

    ``reset_every=1`` clears the bank before every frame (cold start).
    """
    out = []
    last_seq = None
    for i, fr in enumerate(frames):
        reset = fr.sequence_id != last_seq or (reset_every > 0 and i % reset_every == 0)
        out.append(engine.step(fr, reset=reset))
        last_seq = fr.sequence_id
    return out


# --- training -------------------------------------------------------------

def train_step(model: ToyModel, items, engines: list[Engine],
               loss_cfg: LossConfig = LossConfig()) -> tuple[float, dict, int]:
    """One lock-step iteration over lanes.

    ``items[k]`` is ``(frame, reset)`` or ``None`` for an idle lane.  Each
    lane runs a single-frame forward pass against its bank (a constant),
    the loss is taken on labeled frames, and parameter gradients are summed
    over lanes.  Banks are then updated with detached values.

    Returns ``(summed loss, summed grads, number of labeled lane-frames)``.
    """
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    total = 0.0
    n_lab = 0
    for item, eng in zip(items, engines):
        if item is None:
            continue
        frame, reset = item
        if eng.model is not model:
            eng.model = model
        res = eng.advance(frame, reset, keep_cache=frame.labeled, decode=False)
        if not frame.labeled:
            continue
        targets = build_targets(frame.boxes, eng.pm_spec, loss_cfg.sigma_cells)
        loss, dg = detection_loss(res.g, targets, loss_cfg)
        lane_grads = backward_frame(model, res.inputs, res.cache, dg)
        for k, v in lane_grads.items():
            grads[k] += v
        total += loss
        n_lab += 1
    return total, grads, n_lab


@dataclass
class SGD:
    """Momentum SGD with step decay and optional global-norm clipping."""

    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float | None = 5.0
    velocity: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for k, g in grads.items():
            v = self.velocity.get(k)
            if v is None:
                v = self.velocity[k] = np.zeros_like(g)
            v *= self.momentum
            v += scale * g
            params[k] -= lr * v
        return norm


def step_decay(base_lr: float, epoch: int, epochs: int, milestones=(0.6, 0.85), gamma: float = 0.3) -> float:
    k = sum(epoch >= int(m * epochs) for m in milestones)
    return base_lr * gamma ** k


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0
    l_max: int = 20
    dtsl: bool = True
    seed: int = 0
    gt_foreground: bool = True
    milestones: tuple = (0.6, 0.85)
    gamma: float = 0.3


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    segment_length: list = field(default_factory=list)
    forward_passes: int = 0
    iterations: int = 0


def train(model: ToyModel, dataset, spec: GridSpec, cfg: TrainConfig = TrainConfig(), aug_ranges=None,
          gt_db=None, loss_cfg: LossConfig = LossConfig(), samples=None) -> TrainHistory:
    """Schedule-driven training: sort, split (DTSL length), lanes, SGD.

    ``aug_ranges`` enables stream-consistent augmentation; with ``gt_db``
    and ``aug_ranges.n_paste > 0`` objects are also pasted along streams.
    """
    from .seq_aug import augment_stream_frame, derive_state
    from .seq_sampler import DtslConfig, dtsl_length, epoch_schedule

    samples = dataset.samples() if samples is None else samples
    opt = SGD(cfg.lr, cfg.momentum, cfg.clip_norm)
    hist = TrainHistory()
    ecfg = EngineConfig(gt_foreground=cfg.gt_foreground)
    db_ids = gt_db.ids() if gt_db is not None else ()
    anchors: dict = {}
    for ep in range(cfg.epochs):
        dcfg = DtslConfig(cfg.l_max, cfg.epochs, ep)
        sched = epoch_schedule(samples, dcfg, cfg.batch_size, cfg.seed, dtsl=cfg.dtsl)
        lr = step_decay(cfg.lr, ep, cfg.epochs, cfg.milestones, cfg.gamma)
        engines = [Engine(model, spec, ecfg) for _ in range(cfg.batch_size)]
        states: dict = {}
        ep_loss, ep_n = 0.0, 0
        for row in sched.iterations():
            items = []
            for it in row:
                if it is None:
                    items.append(None)
                    continue
                s, reset = it
                frame = dataset.frame(s.sequence_id, s.frame_index)
                if aug_ranges is not None:
                    st = states.get(s.sequence_id)
                    if st is None:
                        st = states[s.sequence_id] = derive_state(cfg.seed, s.sequence_id, ep, aug_ranges, db_ids)
                    if s.sequence_id not in anchors:
                        anchors[s.sequence_id] = dataset.frame(s.sequence_id, 0).pose
                    frame = augment_stream_frame(frame, st, gt_db, s.frame_index, anchors[s.sequence_id])
                items.append((frame, reset))
            loss, grads, n = train_step(model, items, engines, loss_cfg)
            hist.forward_passes += sum(1 for i in items if i is not None)
            hist.iterations += 1
            if n == 0:
                continue
            for v in grads.values():
                v /= n
            opt.step(model.params, grads, lr)
            ep_loss += loss
            ep_n += n
        hist.epoch_loss.append(ep_loss / max(ep_n, 1))
        hist.segment_length.append(dtsl_length(dcfg) if cfg.dtsl else cfg.l_max)
        log.info("epoch %d: seg_len=%d lr=%.4g loss=%.5f", ep, hist.segment_length[-1], lr, hist.epoch_loss[-1])
    return hist
