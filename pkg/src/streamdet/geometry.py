"""Rigid-transform algebra for ego-motion compensation.

Poses are 4x4 homogeneous matrices mapping points from a source frame into a
target frame (``target_T_source``).  An ego pose ``world_T_ego`` therefore
maps ego-frame points into the world.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
SE2_TOL = 1e-6

FLIP_NONE = "none"
FLIP_X = "x"
FLIP_Y = "y"
_FLIPS = (FLIP_NONE, FLIP_X, FLIP_Y)


class GeometryError(ValueError):
    """Raised when a transform violates a geometric precondition."""


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid SE(3) transform stored as a 4x4 row-major float64 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"pose matrix must be 4x4, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if not self.is_rigid():
            raise GeometryError("pose is not a rigid transform")

    def __eq__(self, other):
        # exact equality, so states built from the same draws compare equal
        return isinstance(other, Pose) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.matrix[1, 0], self.matrix[0, 0]))

    def is_rigid(self, tol: float = ORTHO_TOL) -> bool:
        r = self.rotation
        ortho = np.max(np.abs(r.T @ r - np.eye(3))) < tol
        return bool(ortho and abs(np.linalg.det(r) - 1.0) < tol
                    and np.allclose(self.matrix[3], [0, 0, 0, 1], atol=tol))

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def to_bytes(self) -> bytes:
        """16 little-endian float64 values, row-major."""
        return struct.pack("<16d", *self.matrix.ravel())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Pose":
        return cls(np.array(struct.unpack("<16d", buf)).reshape(4, 4))

    def __repr__(self):
        t = self.translation
        return f"Pose(t=({t[0]:.3f}, {t[1]:.3f}, {t[2]:.3f}), yaw={self.yaw:.4f})"


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def translation(x: float, y: float, z: float = 0.0) -> Pose:
    return Pose.from_rt(np.eye(3), (x, y, z))


def rotation_z(theta: float) -> Pose:
    return Pose.from_rt(rot_z(theta), (0.0, 0.0, 0.0))


def planar_pose(x: float, y: float, yaw: float, z: float = 0.0) -> Pose:
    """Pose with heading ``yaw`` about +z located at ``(x, y, z)``."""
    return Pose.from_rt(rot_z(yaw), (x, y, z))


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.matrix @ b.matrix)


def invert(p: Pose) -> Pose:
    r_t = p.rotation.T
    return Pose.from_rt(r_t, -r_t @ p.translation)


def relative_pose(t_cur: Pose, t_last: Pose) -> Pose:
    """Transform taking last-frame coordinates into the current frame."""
    return Pose(invert(t_cur).matrix @ t_last.matrix)


@dataclass(frozen=True)
class AugTransform:
    """Global frame augmentation: flip, then rotate, scale and translate.

    ``flip="x"`` mirrors across the x axis (negates y); ``flip="y"`` mirrors
    across the y axis (negates x).
    """

    flip: str = FLIP_NONE
    rotation_z: float = 0.0
    scale: float = 1.0
    translation: tuple = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        if self.flip not in _FLIPS:
            raise GeometryError(f"unknown flip axis {self.flip!r}")
        if not self.scale > 0:
            raise GeometryError("scale must be positive")
        object.__setattr__(self, "translation",
                           tuple(float(v) for v in self.translation))

    @classmethod
    def identity(cls) -> "AugTransform":
        return cls()

    @property
    def is_identity(self) -> bool:
        return (self.flip == FLIP_NONE and self.rotation_z == 0.0
                and self.scale == 1.0 and not any(self.translation))

    @property
    def t_flip(self) -> np.ndarray:
        d = {FLIP_NONE: (1, 1), FLIP_X: (1, -1), FLIP_Y: (-1, 1)}[self.flip]
        return np.diag([d[0], d[1], 1.0, 1.0]).astype(np.float64)

    @property
    def t_rot(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = rot_z(self.rotation_z)
        return m

    @property
    def t_rot_inv(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = rot_z(-self.rotation_z)
        return m

    @property
    def t_scale(self) -> np.ndarray:
        s = self.scale
        return np.diag([s, s, s, 1.0])

    @property
    def t_scale_inv(self) -> np.ndarray:
        s = 1.0 / self.scale
        return np.diag([s, s, s, 1.0])

    @property
    def t_trans(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, 3] = self.translation
        return m

    @property
    def t_trans_inv(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, 3] = -np.asarray(self.translation)
        return m

    @property
    def matrix(self) -> np.ndarray:
        """Full augmentation T_t . T_s . T_r . T_f (a similarity)."""
        return self.t_trans @ self.t_scale @ self.t_rot @ self.t_flip

    def map_yaw(self, yaw):
        """Heading of a box after the flip and rotation of this transform."""
        yaw = np.asarray(yaw, dtype=np.float64)
        if self.flip == FLIP_X:
            yaw = -yaw
        elif self.flip == FLIP_Y:
            yaw = np.pi - yaw
        return wrap_angle(yaw + self.rotation_z)


def augmented_relative_pose(t_cur: Pose, t_last: Pose, aug: AugTransform) -> Pose:
    """Relative pose between two frames that both carry augmentation ``aug``.

    Computed literally as
    T_t T_s T_r T_f . T_cur^-1 T_last . T_f T_r^-1 T_s^-1 T_t^-1.
    """
    left = aug.t_trans @ aug.t_scale @ aug.t_rot @ aug.t_flip
    right = aug.t_flip @ aug.t_rot_inv @ aug.t_scale_inv @ aug.t_trans_inv
    m = left @ invert(t_cur).matrix @ t_last.matrix @ right
    return Pose(m)


def as_matrix(p) -> np.ndarray:
    if isinstance(p, Pose):
        return p.matrix
    if isinstance(p, AugTransform):
        return p.matrix
    m = np.asarray(p, dtype=np.float64)
    if m.shape != (4, 4):
        raise GeometryError(f"expected a 4x4 transform, got {m.shape}")
    return m


def apply_to_points(p, points: np.ndarray) -> np.ndarray:
    """Transform xyz columns of an (N, >=3) array; other columns pass through."""
    m = as_matrix(p)
    pts = np.asarray(points, dtype=np.float64)
    out = pts.copy()
    if pts.shape[0] == 0:
        return out
    out[:, :3] = pts[:, :3] @ m[:3, :3].T + m[:3, 3]
    return out


def se2_of(p, tol: float = SE2_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Ground-plane part of a transform: (2x2 block, xy translation).

    The 3x3 block must be a z-rotation (optionally mirrored in-plane) times a
    uniform scale; anything tilting the z axis is rejected.
    """
    m = as_matrix(p)
    block = m[:3, :3]
    s = abs(block[2, 2])
    if s < tol:
        raise GeometryError("transform collapses the z axis")
    off_plane = max(np.max(np.abs(block[:2, 2])), np.max(np.abs(block[2, :2])))
    if off_plane > tol * max(1.0, s) or block[2, 2] < 0:
        raise GeometryError("transform has out-of-plane rotation")
    r2 = block[:2, :2] / s
    if np.max(np.abs(r2.T @ r2 - np.eye(2))) > tol:
        raise GeometryError("in-plane block is not a scaled rotation")
    return block[:2, :2].copy(), m[:2, 3].copy()


def wrap_angle(theta):
    """Map angles into [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


def random_pose(rng: np.random.Generator, planar: bool = False, extent: float = 50.0) -> Pose:
    """Random rigid pose; used by property tests and the simulator."""
    if planar:
        return planar_pose(*rng.uniform(-extent, extent, 2), rng.uniform(-np.pi, np.pi))
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return Pose.from_rt(r, rng.uniform(-extent, extent, 3))
