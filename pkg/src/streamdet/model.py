"""Desk-scale BEV detector with analytic gradients.

Data path for one frame (shapes for the default grid)::

    x (6, H, W) --FM fusion--> f (6, H, W) --conv3x3+ReLU--> r (C_mid, H, W)
      --1x1 heads--> p = [heat logit, log w, log l, sin yaw, cos yaw] (5, H, W)
      --PM fusion--> g (5, H, W) --> loss / decoding

History inputs to both fusion points are constants: no derivative is ever
formed with respect to them.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image_fusion import (ADD, CONCAT, FUSION_MODES, GRU, MAX, ConcatParams, GruFusionParams, GridSpec,
                           concat_backward, concat_forward, gru_backward, gru_forward, half_channels, mix,
                           mean_pool_matrix)

C_IN = 6
C_PM = 5
FEATURES = ("occupancy", "density", "mean_z", "max_z", "mean_intensity", "mean_dt")
PM_CHANNELS = ("heat", "log_w", "log_l", "sin_yaw", "cos_yaw")
LOG_SIZE_CLIP = 4.0

CKPT_MAGIC = b"SDTM"
CKPT_VERSION = 1


@dataclass(frozen=True)
class FusionConfig:
    """Which memory-bank fusion points are active and in which mode."""

    pc: bool = True
    fm: str | None = CONCAT
    pm: str | None = CONCAT

    def __post_init__(self):
        for name in ("fm", "pm"):
            mode = getattr(self, name)
            if mode is not None and mode not in FUSION_MODES:
                raise ValueError(f"unknown {name} fusion mode {mode!r}")

    @classmethod
    def single_frame(cls) -> "FusionConfig":
        return cls(pc=False, fm=None, pm=None)

    @property
    def uses_history(self) -> bool:
        return self.pc or self.fm is not None or self.pm is not None


@dataclass(frozen=True)
class LossConfig:
    pos_weight: float = 20.0
    reg_weight: float = 0.5
    sigma_cells: float = 1.0


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def softplus(a):
    return np.logaddexp(0.0, a)


class ToyModel:
    """Parameters live in ``self.params`` (name -> float64 array)."""

    def __init__(self, params: dict, fusion: FusionConfig, c_mid: int):
        self.params = params
        self.fusion = fusion
        self.c_mid = c_mid

    @classmethod
    def init(cls, fusion: FusionConfig = FusionConfig(), c_mid: int = 16, seed: int = 0,
             zero: bool = False) -> "ToyModel":
        rng = np.random.Generator(np.random.PCG64(seed))
        p = {
            "conv1_w": rng.normal(0.0, np.sqrt(2.0 / (C_IN * 9)), (c_mid, C_IN, 3, 3)),
            "conv1_b": np.zeros(c_mid),
            "heat_w": rng.normal(0.0, 0.1, (1, c_mid)),
            "heat_b": np.full(1, -2.0),
            "reg_w": rng.normal(0.0, 0.05, (4, c_mid)),
            "reg_b": np.array([0.0, 0.5, 0.0, 1.0]),
        }
        p.update(_init_fusion("fm", fusion.fm, C_IN, rng))
        p.update(_init_fusion("pm", fusion.pm, C_PM, rng))
        if zero:
            p = {k: np.zeros_like(v) for k, v in p.items()}
        return cls(p, fusion, c_mid)

    def copy(self) -> "ToyModel":
        return ToyModel({k: v.copy() for k, v in self.params.items()}, self.fusion, self.c_mid)

    def fusion_params(self, point: str):
        mode = getattr(self.fusion, point)
        p = self.params
        if mode == CONCAT:
            return ConcatParams(p[f"{point}_w_cur"], p[f"{point}_w_hist"],
                                p.get(f"{point}_w_out"), p.get(f"{point}_b_out"))
        if mode == GRU:
            return GruFusionParams(*(p[f"{point}_{k}"] for k in ("w_z", "w_r", "w_h", "b_z", "b_r", "b_h")))
        return None

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    # -- checkpoint --------------------------------------------------------

    def save(self, path, spec: GridSpec):
        """Binary checkpoint: magic, version, JSON header, f32 parameter blob."""
        names = sorted(self.params)
        header = {
            "grid": asdict(spec),
            "channels": list(FEATURES),
            "c_in": C_IN,
            "c_mid": self.c_mid,
            "fusion": asdict(self.fusion),
            "params": [[n, list(self.params[n].shape)] for n in names],
        }
        head = json.dumps(header, sort_keys=True).encode()
        blob = np.concatenate([self.params[n].ravel() for n in names]).astype("<f4").tobytes()
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head + blob)

    @classmethod
    def load(cls, path) -> tuple["ToyModel", GridSpec]:
        buf = open(path, "rb").read()
        if buf[:4] != CKPT_MAGIC:
            raise ValueError("not a model checkpoint")
        version, n_head = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(buf[12:12 + n_head])
        if header["c_in"] != C_IN or tuple(header["channels"]) != FEATURES:
            raise ValueError("checkpoint channel contract differs")
        flat = np.frombuffer(buf, "<f4", offset=12 + n_head).astype(np.float64)
        params, off = {}, 0
        for name, shape in header["params"]:
            n = int(np.prod(shape))
            params[name] = flat[off:off + n].reshape(shape).copy()
            off += n
        if off != flat.size:
            raise ValueError("checkpoint parameter blob has the wrong length")
        return cls(params, FusionConfig(**header["fusion"]), header["c_mid"]), GridSpec(**header["grid"])


def _init_fusion(point: str, mode: str | None, c: int, rng: np.random.Generator) -> dict:
    if mode == CONCAT:
        k = half_channels(c)
        if point == "fm":
            hist = np.zeros((k, c))
            hist[:, :k] = 0.5 * np.eye(k)
            hist[:, k:2 * k] = 0.5 * np.eye(k)[:, : c - k]
            return {"fm_w_cur": mean_pool_matrix(c) + rng.normal(0.0, 0.01, (k, c)),
                    "fm_w_hist": hist}
        w_cur = np.eye(k, c)
        w_hist = np.zeros((k, c))
        w_hist[0, 0] = 0.5
        w_out = np.zeros((c, 2 * k))
        w_out[:k, :k] = np.eye(k)
        w_out[0, k] = 0.3
        b_out = np.zeros(c)
        b_out[c - 1] = 1.0
        return {"pm_w_cur": w_cur, "pm_w_hist": w_hist, "pm_w_out": w_out, "pm_b_out": b_out}
    if mode == GRU:
        g = GruFusionParams.init(c, rng, scale=0.1, b_z=-1.0)
        return {f"{point}_{k}": v for k, v in g.arrays().items()}
    return {}


# --- layers ---------------------------------------------------------------

def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """'Same' 3x3 convolution; returns output and the im2col matrix."""
    c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    cols = cols.transpose(1, 2, 0, 3, 4).reshape(h * wd, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.T.reshape(w.shape[0], h, wd), cols


def conv3x3_backward(cols: np.ndarray, w: np.ndarray, dout: np.ndarray, in_shape) -> tuple:
    c, h, wd = in_shape
    d = dout.reshape(dout.shape[0], -1)  # (O, HW)
    dw = (d @ cols).reshape(w.shape)
    db = d.sum(axis=1)
    dcols = (w.reshape(w.shape[0], -1).T @ d).reshape(c, 3, 3, h, wd)
    dxp = np.zeros((c, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd] += dcols[:, i, j]
    return dw, db, dxp[:, 1:-1, 1:-1]


def fusion_forward(mode, x, mx, h, mh, params):
    if mode == ADD:
        return x + h
    if mode == MAX:
        out = np.maximum(x, h)
        only_x = (mx == 1) & (mh == 0)
        only_h = (mx == 0) & (mh == 1)
        out = np.where(only_x, x, out)
        return np.where(only_h, h, out)
    if mode == CONCAT:
        return concat_forward(params, x, h)
    if mode == GRU:
        return gru_forward(params, h, x)
    raise ValueError(f"unknown fusion mode {mode!r}")


def fusion_backward(mode, x, mx, h, mh, params, dout) -> tuple[dict, np.ndarray]:
    """Parameter and current-input gradients of a fusion op (history is constant)."""
    if mode == ADD:
        return {}, dout
    if mode == MAX:
        only_x = (mx == 1) & (mh == 0)
        only_h = (mx == 0) & (mh == 1)
        take_x = np.where(only_x, True, np.where(only_h, False, x >= h))
        return {}, np.where(take_x, dout, 0.0)
    if mode == CONCAT:
        return concat_backward(params, x, h, dout)
    if mode == GRU:
        return gru_backward(params, h, x, dout)
    raise ValueError(f"unknown fusion mode {mode!r}")


# --- network --------------------------------------------------------------

@dataclass
class FrameInputs:
    """Current BEV features and motion-compensated history for one frame."""

    x: np.ndarray
    x_mask: np.ndarray
    fm_hist: np.ndarray | None = None
    fm_hist_mask: np.ndarray | None = None
    pm_hist: np.ndarray | None = None
    pm_hist_mask: np.ndarray | None = None


def _hist(arr, mask, shape):
    if arr is None:
        return np.zeros(shape), np.zeros(shape[1:], np.uint8)
    return arr, mask


def trunk(model: ToyModel, f: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
    """conv1 + ReLU + heads on the FM-fused map: (heat logits, reg, cache)."""
    p = model.params
    a, cols = conv3x3(f, p["conv1_w"], p["conv1_b"])
    r = np.maximum(a, 0.0)
    heat = mix(p["heat_w"], r) + p["heat_b"][:, None, None]
    reg = mix(p["reg_w"], r) + p["reg_b"][:, None, None]
    return heat, reg, {"cols": cols, "a": a, "r": r}


def run_frame(model: ToyModel, inp: FrameInputs, keep_cache: bool = False):
    """Full per-frame network.  Returns ``(f, p, g, cache)``.

    ``f`` is the FM-fused feature map (stored back as FM history), ``p`` the
    raw prediction map and ``g`` the PM-fused prediction map (stored back as
    PM history and decoded).
    """
    fz = model.fusion
    x = inp.x
    cache = {}
    if fz.fm is not None:
        h, mh = _hist(inp.fm_hist, inp.fm_hist_mask, x.shape)
        f = fusion_forward(fz.fm, x, inp.x_mask, h, mh, model.fusion_params("fm"))
        cache["fm"] = (h, mh)
    else:
        f = x
    heat, reg, tc = trunk(model, f)
    pmap = np.concatenate([heat, reg])
    ones = np.ones(pmap.shape[1:], np.uint8)
    if fz.pm is not None:
        h, mh = _hist(inp.pm_hist, inp.pm_hist_mask, pmap.shape)
        g = fusion_forward(fz.pm, pmap, ones, h, mh, model.fusion_params("pm"))
        cache["pm"] = (h, mh)
    else:
        g = pmap
    if keep_cache:
        cache.update(tc)
        cache["f"] = f
        cache["p"] = pmap
        return f, pmap, g, cache
    return f, pmap, g, None


def backward_frame(model: ToyModel, inp: FrameInputs, cache: dict, dg: np.ndarray,
                   want_input_grad: bool = False) -> dict:
    """Parameter gradients given dLoss/dg.  Only parameters (and optionally
    the current input ``x``) receive gradients."""
    fz = model.fusion
    p = model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    pmap = cache["p"]
    if fz.pm is not None:
        h, mh = cache["pm"]
        ones = np.ones(pmap.shape[1:], np.uint8)
        pg, dp = fusion_backward(fz.pm, pmap, ones, h, mh, model.fusion_params("pm"), dg)
        for k, v in pg.items():
            grads[f"pm_{k}"] += v
    else:
        dp = dg
    dheat, dreg = dp[:1], dp[1:]
    r = cache["r"]
    flat = lambda a: a.reshape(a.shape[0], -1)  # noqa: E731
    grads["heat_w"] += flat(dheat) @ flat(r).T
    grads["heat_b"] += flat(dheat).sum(axis=1)
    grads["reg_w"] += flat(dreg) @ flat(r).T
    grads["reg_b"] += flat(dreg).sum(axis=1)
    dr = mix(p["heat_w"].T, dheat) + mix(p["reg_w"].T, dreg)
    da = dr * (cache["a"] > 0)
    f = cache["f"]
    dw, db, df = conv3x3_backward(cache["cols"], p["conv1_w"], da, f.shape)
    grads["conv1_w"] += dw
    grads["conv1_b"] += db
    dx = df
    if fz.fm is not None:
        h, mh = cache["fm"]
        fg, dx = fusion_backward(fz.fm, inp.x, inp.x_mask, h, mh, model.fusion_params("fm"), df)
        for k, v in fg.items():
            grads[f"fm_{k}"] += v
    if want_input_grad:
        grads["__x__"] = dx
    return grads


def forward(model: ToyModel, grid_after_fm_fusion: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trunk and heads on an already FM-fused map: ``(heat, reg)``.

    ``heat`` is the sigmoid score map (1, H, W); ``reg`` is (4, H, W).
    """
    f = np.asarray(grid_after_fm_fusion, dtype=np.float64)
    if f.shape[0] != C_IN:
        raise ValueError(f"expected {C_IN} input channels, got {f.shape[0]}")
    heat, reg, _ = trunk(model, f)
    return sigmoid(heat), reg


# --- loss -----------------------------------------------------------------

@dataclass
class Targets:
    heat: np.ndarray  # (H, W) in [0, 1]
    reg_cells: np.ndarray  # (K, 2) row, col
    reg_values: np.ndarray  # (K, 4)

    @property
    def n_objects(self) -> int:
        return len(self.reg_cells)


def build_targets(boxes: np.ndarray, spec: GridSpec, sigma_cells: float = 1.0) -> Targets:
    """Gaussian-splatted center heatmap plus regression targets at center cells.

    ``boxes`` rows are ``x, y, z, w, l, h, yaw, class``; boxes whose center
    falls outside the grid are ignored.
    """
    heat = np.zeros((spec.height, spec.width))
    cells, values = [], []
    if len(boxes):
        cx, cy = spec.cell_centers()
        sig = sigma_cells * spec.cell_size
        inside = spec.contains(boxes[:, 0], boxes[:, 1])
        for b in boxes[inside]:
            g = np.exp(-((cx - b[0]) ** 2 + (cy - b[1]) ** 2) / (2 * sig * sig))
            row, col = spec.cell_of(b[0], b[1])
            g[row, col] = 1.0
            np.maximum(heat, g, out=heat)
            cells.append((int(row), int(col)))
            values.append((np.log(b[3]), np.log(b[4]), np.sin(b[6]), np.cos(b[6])))
    return Targets(heat, np.array(cells, np.int64).reshape(-1, 2), np.array(values).reshape(-1, 4))


def heat_loss(logits: np.ndarray, target: np.ndarray, pos_weight: float) -> tuple[float, np.ndarray]:
    """Mean over cells of (1 + w*y) * (p - y)^2 * BCE(p, y); returns (loss, dlogits)."""
    p = sigmoid(logits)
    y = target
    bce = y * softplus(-logits) + (1.0 - y) * softplus(logits)
    mod = (p - y) ** 2
    wgt = 1.0 + pos_weight * y
    n = logits.size
    loss = np.sum(wgt * mod * bce) / n  # numpy scalar: keeps the input precision
    dp_dl = p * (1.0 - p)
    grad = wgt * (2.0 * (p - y) * dp_dl * bce + mod * (p - y)) / n
    return loss, grad


def smooth_l1(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ad = np.abs(d)
    val = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    grad = np.where(ad < 1.0, d, np.sign(d))
    return val, grad


def detection_loss(g: np.ndarray, targets: Targets, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Loss on the PM-fused prediction map and its gradient."""
    loss, dheat = heat_loss(g[0], targets.heat, cfg.pos_weight)
    dg = np.zeros_like(g)
    dg[0] = dheat
    if targets.n_objects:
        rows, cols = targets.reg_cells[:, 0], targets.reg_cells[:, 1]
        pred = g[1:, rows, cols].T  # (K, 4)
        val, gr = smooth_l1(pred - targets.reg_values)
        scale = cfg.reg_weight / targets.n_objects
        loss = loss + val.sum() * scale
        np.add.at(dg[1:], (slice(None), rows, cols), (gr * scale).T)
    return loss, dg


def model_from_bytes(buf: bytes) -> tuple[ToyModel, GridSpec]:
    import tempfile
    import os

    with tempfile.NamedTemporaryFile(delete=False) as f:
        f.write(buf)
    try:
        return ToyModel.load(f.name)
    finally:
        os.unlink(f.name)


def params_to_npz(model: ToyModel) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **model.params)
    return buf.getvalue()
