"""Image-style memory: BEV grid warping and temporal fusion operators.

Grids are indexed ``data[channel, row, col]`` with rows along +y and columns
along +x.  Cell ``(i, j)`` has its metric center at
``(x_min + (j + 0.5) * cell_size, y_min + (i + 0.5) * cell_size)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import as_matrix, se2_of

ADD, MAX, CONCAT, GRU = "add", "max", "concat", "gru"
FUSION_MODES = (ADD, MAX, CONCAT, GRU)


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    y_min: float
    cell_size: float
    width: int
    height: int
    channels: int = 1

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid width and height must be >= 1")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @classmethod
    def centered(cls, half_extent: float, cell_size: float, channels: int = 1) -> "GridSpec":
        n = int(round(2 * half_extent / cell_size))
        return cls(-half_extent, -half_extent, cell_size, n, n, channels)

    def with_channels(self, channels: int) -> "GridSpec":
        return GridSpec(self.x_min, self.y_min, self.cell_size, self.width, self.height, channels)

    @property
    def x_max(self) -> float:
        return self.x_min + self.width * self.cell_size

    @property
    def y_max(self) -> float:
        return self.y_min + self.height * self.cell_size

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(H, W) arrays of cell-center x and y."""
        xs = self.x_min + (np.arange(self.width) + 0.5) * self.cell_size
        ys = self.y_min + (np.arange(self.height) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)

    def cell_of(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Integer (row, col) of metric coordinates; may be out of range."""
        col = np.floor((np.asarray(x) - self.x_min) / self.cell_size).astype(np.int64)
        row = np.floor((np.asarray(y) - self.y_min) / self.cell_size).astype(np.int64)
        return row, col

    def contains(self, x, y) -> np.ndarray:
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= self.x_min) & (x < self.x_max) & (y >= self.y_min) & (y < self.y_max)

    def center_of(self, row, col) -> tuple[np.ndarray, np.ndarray]:
        return (self.x_min + (np.asarray(col) + 0.5) * self.cell_size,
                self.y_min + (np.asarray(row) + 0.5) * self.cell_size)


@dataclass(eq=False)
class ImageGrid:
    """Dense BEV map plus occupancy mask and occupancy count planes."""

    spec: GridSpec
    data: np.ndarray
    mask: np.ndarray = None
    count: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.spec.shape:
            raise ValueError(f"data shape {self.data.shape} does not match spec {self.spec.shape}")
        hw = (self.spec.height, self.spec.width)
        self.mask = np.zeros(hw, np.uint8) if self.mask is None else np.asarray(self.mask, np.uint8)
        self.count = np.zeros(hw, np.int64) if self.count is None else np.asarray(self.count, np.int64)

    @classmethod
    def zeros(cls, spec: GridSpec) -> "ImageGrid":
        return cls(spec, np.zeros(spec.shape))

    @classmethod
    def dense(cls, spec: GridSpec, data: np.ndarray) -> "ImageGrid":
        """Grid whose every cell is valid (used for prediction maps)."""
        hw = (spec.height, spec.width)
        return cls(spec, data, np.ones(hw, np.uint8), np.ones(hw, np.int64))

    def copy(self) -> "ImageGrid":
        return ImageGrid(self.spec, self.data.copy(), self.mask.copy(), self.count.copy())

    def validate(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("grid data must be finite")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be binary")
        if np.any(self.count < 0):
            raise ValueError("count must be non-negative")
        if np.any((self.count == 0) != (self.mask == 0)):
            raise ValueError("count and mask disagree")

    @property
    def nbytes(self) -> int:
        return self.data.nbytes + self.mask.nbytes + self.count.nbytes

    def to_bytes(self) -> bytes:
        """Flat f32 dump: u32 width, height, channels then C*H*W values."""
        s = self.spec
        head = np.array([s.width, s.height, s.channels], dtype="<u4").tobytes()
        return head + self.data.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, spec: GridSpec) -> "ImageGrid":
        w, h, c = np.frombuffer(buf[:12], dtype="<u4")
        if (w, h, c) != (spec.width, spec.height, spec.channels):
            raise ValueError(f"dump header {(w, h, c)} does not match spec")
        data = np.frombuffer(buf[12:], dtype="<f4").astype(np.float64).reshape(c, h, w)
        return cls(spec, data)

    def summary_csv(self) -> str:
        rows = ["channel,min,max,mean"]
        for k, ch in enumerate(self.data):
            rows.append(f"{k},{ch.min():.9g},{ch.max():.9g},{ch.mean():.9g}")
        return "\n".join(rows) + "\n"


# --- warping --------------------------------------------------------------

def affine_grid(t_rel, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Fractional source (row, col) for every output cell.

    Output cell centers are mapped through the inverse of ``t_rel``'s
    ground-plane action; the metric-to-index conversion uses the grid's
    cell size.
    """
    rot2, t2 = se2_of(t_rel)
    inv = np.linalg.inv(rot2)
    cx, cy = spec.cell_centers()
    dx = cx - t2[0]
    dy = cy - t2[1]
    sx = inv[0, 0] * dx + inv[0, 1] * dy
    sy = inv[1, 0] * dx + inv[1, 1] * dy
    col = _snap((sx - spec.x_min) / spec.cell_size - 0.5)
    row = _snap((sy - spec.y_min) / spec.cell_size - 0.5)
    return row, col


def _snap(idx: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    # round-off from the metric round trip must not leak into exact shifts
    nearest = np.rint(idx)
    return np.where(np.abs(idx - nearest) < tol, nearest, idx)


def grid_sample(data: np.ndarray, row: np.ndarray, col: np.ndarray, mode: str = "bilinear") -> np.ndarray:
    """Sample (C, H, W) ``data`` at fractional indices with zero padding."""
    c, h, w = data.shape
    if mode == "nearest":
        ri = np.floor(row + 0.5).astype(np.int64)
        ci = np.floor(col + 0.5).astype(np.int64)
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        out = np.zeros((c,) + row.shape)
        out[:, ok] = data[:, ri[ok], ci[ok]]
        return out
    # one-cell zero border; indices clipped onto it read as padding
    padded = np.pad(data, ((0, 0), (1, 1), (1, 1)))
    r0 = np.floor(row)
    c0 = np.floor(col)
    fr = row - r0
    fc = col - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    flat = padded.reshape(c, -1)
    ri = [(np.clip(r0 + k, -1, h) + 1) * (w + 2) for k in (0, 1)]
    ci = [np.clip(c0 + k, -1, w) + 1 for k in (0, 1)]
    take = lambda r, q: np.take(flat, r + q, axis=1)  # noqa: E731
    return (take(ri[0], ci[0]) * ((1 - fr) * (1 - fc))
            + take(ri[0], ci[1]) * ((1 - fr) * fc)
            + take(ri[1], ci[0]) * (fr * (1 - fc))
            + take(ri[1], ci[1]) * (fr * fc))


def warp(grid: ImageGrid, t_rel) -> ImageGrid:
    """Re-express a history grid in the current frame (backward sampling).

    Features are bilinear; mask and count are nearest-neighbor so the mask
    stays binary.
    """
    spec = grid.spec
    m = as_matrix(t_rel)
    row, col = affine_grid(m, spec)
    data = grid_sample(grid.data, row, col, "bilinear")
    aux = np.stack([grid.mask.astype(np.float64), grid.count.astype(np.float64)])
    aux = grid_sample(aux, row, col, "nearest")
    mask = (aux[0] >= 0.5).astype(np.uint8)
    count = np.where(mask == 1, np.rint(aux[1]), 0).astype(np.int64)
    return ImageGrid(spec, data, mask, count)


# --- fusion parameters ----------------------------------------------------

def half_channels(c: int) -> int:
    return (c + 1) // 2


def mean_pool_matrix(c: int) -> np.ndarray:
    """Fixed C -> ceil(C/2) projection pooling consecutive channel pairs.

    Each row is a pair mean scaled by sqrt(2) (a lone trailing channel is
    kept as is), so rows are orthonormal.
    """
    h = half_channels(c)
    p = np.zeros((h, c))
    for g in range(h):
        members = [k for k in (2 * g, 2 * g + 1) if k < c]
        p[g, members] = 1.0 / np.sqrt(len(members))
    return p


@dataclass
class ConcatParams:
    """Learned 1x1 compressions for Concat fusion.

    ``w_cur`` and ``w_hist`` are (ceil(C/2), C).  When ``w_out``/``b_out`` are
    set, the 2*ceil(C/2) concatenation is mixed back to C channels so the
    fused map keeps the input layout.
    """

    w_cur: np.ndarray
    w_hist: np.ndarray
    w_out: np.ndarray | None = None
    b_out: np.ndarray | None = None

    @classmethod
    def fixed(cls, c: int) -> "ConcatParams":
        p = mean_pool_matrix(c)
        return cls(p, p.copy())

    def arrays(self) -> dict:
        out = {"w_cur": self.w_cur, "w_hist": self.w_hist}
        if self.w_out is not None:
            out["w_out"] = self.w_out
            out["b_out"] = self.b_out
        return out


@dataclass
class GruFusionParams:
    """Per-cell GRU over [history, current]; every weight is (C, 2C)."""

    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @classmethod
    def init(cls, c: int, rng: np.random.Generator, scale: float = 0.1, b_z: float = 0.0) -> "GruFusionParams":
        w = lambda: rng.normal(0.0, scale, (c, 2 * c))  # noqa: E731
        return cls(w(), w(), w(), np.full(c, b_z), np.zeros(c), np.zeros(c))

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in ("w_z", "w_r", "w_h", "b_z", "b_r", "b_h")}

    def validate(self, c: int):
        for k, a in self.arrays().items():
            want = (c, 2 * c) if k.startswith("w") else (c,)
            if a.shape != want:
                raise ValueError(f"GRU param {k} has shape {a.shape}, expected {want}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"GRU param {k} is not finite")


# --- array-level math (shared with training) ------------------------------

def mix(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """1x1 channel mixing: (O, C) weights over (C, H, W)."""
    c, h, wd = x.shape
    return (w @ x.reshape(c, -1)).reshape(w.shape[0], h, wd)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def concat_forward(params: ConcatParams, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    cat = np.concatenate([mix(params.w_cur, x), mix(params.w_hist, h)])
    if params.w_out is None:
        return cat
    return mix(params.w_out, cat) + params.b_out[:, None, None]


def concat_backward(params: ConcatParams, x: np.ndarray, h: np.ndarray, upstream: np.ndarray):
    """Gradients for params and the current input; history is a constant."""
    c = x.shape[0]
    flat = lambda a: a.reshape(a.shape[0], -1)  # noqa: E731
    grads = {}
    if params.w_out is not None:
        cat = np.concatenate([mix(params.w_cur, x), mix(params.w_hist, h)])
        grads["w_out"] = flat(upstream) @ flat(cat).T
        grads["b_out"] = flat(upstream).sum(axis=1)
        dcat = mix(params.w_out.T, upstream)
    else:
        dcat = upstream
    k = params.w_cur.shape[0]
    d_top, d_bot = dcat[:k], dcat[k:]
    grads["w_cur"] = flat(d_top) @ flat(x).T
    grads["w_hist"] = flat(d_bot) @ flat(h).T
    dx = mix(params.w_cur.T, d_top).reshape(c, *x.shape[1:])
    return grads, dx


def gru_forward(params: GruFusionParams, h: np.ndarray, x: np.ndarray, cache: bool = False):
    c = x.shape[0]
    hx = np.concatenate([h, x])
    z = _sigmoid(mix(params.w_z, hx) + params.b_z[:, None, None])
    r = _sigmoid(mix(params.w_r, hx) + params.b_r[:, None, None])
    q = np.concatenate([r * h, x])
    g = np.tanh(mix(params.w_h, q) + params.b_h[:, None, None])
    out = (1.0 - z) * h + z * g
    if cache:
        return out, {"hx": hx, "z": z, "r": r, "q": q, "g": g, "c": c}
    return out


def gru_backward(params: GruFusionParams, h: np.ndarray, x: np.ndarray, upstream: np.ndarray):
    """Analytic gradients of a GRU fusion step.

    Returns ``(param_grads, x_grad)``.  No derivative with respect to the
    history ``h`` is produced: the memory bank is a constant during training.
    """
    _, k = gru_forward(params, h, x, cache=True)
    c = k["c"]
    z, r, g, hx, q = k["z"], k["r"], k["g"], k["hx"], k["q"]
    flat = lambda a: a.reshape(a.shape[0], -1)  # noqa: E731

    dz = upstream * (g - h)
    dg = upstream * z
    da_h = dg * (1.0 - g * g)
    dq = mix(params.w_h.T, da_h)
    dr = dq[:c] * h
    da_r = dr * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)

    grads = {
        "w_z": flat(da_z) @ flat(hx).T,
        "w_r": flat(da_r) @ flat(hx).T,
        "w_h": flat(da_h) @ flat(q).T,
        "b_z": flat(da_z).sum(axis=1),
        "b_r": flat(da_r).sum(axis=1),
        "b_h": flat(da_h).sum(axis=1),
    }
    dx = dq[c:] + mix(params.w_r.T, da_r)[c:] + mix(params.w_z.T, da_z)[c:]
    return grads, dx


def masked_max(a: np.ndarray, ma: np.ndarray, b: np.ndarray, mb: np.ndarray) -> np.ndarray:
    """Elementwise max where both cells are occupied, else the occupied side."""
    only_a = (ma == 1) & (mb == 0)
    only_b = (ma == 0) & (mb == 1)
    out = np.maximum(a, b)
    out = np.where(only_a, a, out)
    return np.where(only_b, b, out)


# --- grid-level fusion ----------------------------------------------------

def fuse(mode: str, i_cur: ImageGrid, warped_hist: ImageGrid, params=None) -> ImageGrid:
    """Fuse the current grid with motion-compensated history.

    ``add`` and ``max`` are parameter-free.  ``concat`` uses the fixed
    pair-pooling projection unless ``ConcatParams`` are given; ``gru``
    requires ``GruFusionParams``.
    """
    if i_cur.spec != warped_hist.spec:
        raise ValueError("grid specs differ")
    spec = i_cur.spec
    mask = (i_cur.mask | warped_hist.mask).astype(np.uint8)
    if mode == ADD:
        data = i_cur.data + warped_hist.data
        count = i_cur.count + warped_hist.count
    elif mode == MAX:
        data = masked_max(i_cur.data, i_cur.mask, warped_hist.data, warped_hist.mask)
        count = np.maximum(i_cur.count, warped_hist.count)
    elif mode == CONCAT:
        if params is None:
            if spec.channels % 2:
                raise ValueError("fixed Concat projection needs an even channel count")
            params = ConcatParams.fixed(spec.channels)
        data = concat_forward(params, i_cur.data, warped_hist.data)
        count = i_cur.count + warped_hist.count
    elif mode == GRU:
        if params is None:
            raise ValueError("GRU fusion requires GruFusionParams")
        params.validate(spec.channels)
        data = gru_forward(params, warped_hist.data, i_cur.data)
        count = i_cur.count + warped_hist.count
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    if data.shape != spec.shape:
        raise ValueError(f"fusion produced {data.shape}, expected {spec.shape}")
    return ImageGrid(spec, data, mask, count)
