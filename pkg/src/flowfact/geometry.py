"""Pinhole camera model, rigid transforms and flow factorization.

Conventions: right-handed camera frame, +Z along the optical axis, +X right,
+Y down. Image origin is the top-left corner and pixel centres sit on integer
coordinates. Depth is the Z coordinate in the camera frame, not ray length.

A ``RigidTransform`` used for ego flow maps *current* camera coordinates into
the camera frame of the *prior* timestep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_FAR_DEPTH = 100.0

# Flow values are snapped to dyadic grids so that ego + (raw - ego) == raw holds
# bit for bit. In-memory pipelines use a float64-safe grid; files hold float32.
PIPELINE_QUANTUM = 2.0**-20
FILE_QUANTUM = 2.0**-12


class BehindCameraError(ValueError):
    """Raised when projecting a point with non-positive depth."""


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    principal_x: float
    principal_y: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not 0 <= self.principal_x < self.width:
            raise ValueError(f"principal_x {self.principal_x} outside [0, {self.width})")
        if not 0 <= self.principal_y < self.height:
            raise ValueError(f"principal_y {self.principal_y} outside [0, {self.height})")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 90.0) -> "Intrinsics":
        """Centred intrinsics for a horizontal field of view."""
        focal = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.focal, 0.0, self.principal_x], [0.0, self.focal, self.principal_y], [0.0, 0.0, 1.0]]
        )

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (x, y) coordinate arrays of shape (height, width)."""
        xs = np.arange(self.width, dtype=np.float64)
        ys = np.arange(self.height, dtype=np.float64)
        return np.meshgrid(xs, ys)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """Composition: ``(a @ b)(p) == a(b(p))``."""
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an array of points with trailing dimension 3."""
        return _rigid_apply(self.rotation, self.translation, np.asarray(points, dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def rotation_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle: float) -> np.ndarray:
    """Rotation about the camera's down axis; positive angles turn +Z towards +X."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw(angle: float) -> np.ndarray:
    """Yaw of a camera about its vertical (+Y, down) axis."""
    return rotation_y(angle)


@dataclass
class DepthField:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"depth must be HxW, got shape {self.data.shape}")
        finite = np.isfinite(self.data)
        if np.any(self.data[finite] <= 0):
            raise ValueError("finite depth entries must be positive")
        if np.any(np.isnan(self.data)) or np.any(self.data == -np.inf):
            raise ValueError("depth may only contain positive values or +inf")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def hit_mask(self) -> np.ndarray:
        return np.isfinite(self.data)


@dataclass
class FlowField:
    """Per-pixel (u, v) displacement over one frame interval of ``dt`` seconds."""

    data: np.ndarray
    dt: float = 1.0
    valid: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError(f"flow must be HxWx2, got shape {self.data.shape}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.valid is None:
            self.valid = np.ones(self.data.shape[:2], dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.data.shape[:2]:
                raise ValueError("valid mask shape does not match flow")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def per_second(self) -> np.ndarray:
        """Flow in px/s."""
        return self.data / self.dt

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.data[..., 0], self.data[..., 1])

    def quantized(self, quantum: float = PIPELINE_QUANTUM) -> "FlowField":
        """Copy with every component rounded to a multiple of ``quantum`` (a power of two)."""
        return FlowField(np.round(self.data / quantum) * quantum, self.dt, self.valid.copy())

    def __add__(self, other: "FlowField") -> "FlowField":
        _check_compatible(self, other)
        return FlowField(self.data + other.data, self.dt, self.valid & other.valid)


# -- point operations -------------------------------------------------------
#
# The array helpers below are written component-wise (no matmul) so that the
# scalar and field paths perform the exact same floating point operations.


def _backproject_xyz(x, y, z, focal, cx, cy):
    return z / focal * (x - cx), z / focal * (y - cy), z


def _project_xy(X, Y, Z, focal, cx, cy):
    return focal * X / Z + cx, focal * Y / Z + cy


def _rigid_xyz(R, T, X, Y, Z):
    return (
        R[0, 0] * X + R[0, 1] * Y + R[0, 2] * Z + T[0],
        R[1, 0] * X + R[1, 1] * Y + R[1, 2] * Z + T[1],
        R[2, 0] * X + R[2, 1] * Y + R[2, 2] * Z + T[2],
    )


def _rigid_apply(R, T, points):
    X, Y, Z = _rigid_xyz(R, T, points[..., 0], points[..., 1], points[..., 2])
    return np.stack([X, Y, Z], axis=-1)


def backproject(p, z: float, k: Intrinsics) -> np.ndarray:
    if not z > 0:
        raise ValueError(f"depth must be positive, got {z}")
    x, y = p
    return np.array(_backproject_xyz(float(x), float(y), float(z), k.focal, k.principal_x, k.principal_y))


def project(P, k: Intrinsics) -> np.ndarray:
    X, Y, Z = (float(c) for c in P)
    if not Z > 0:
        raise BehindCameraError(f"point has non-positive depth {Z}")
    return np.array(_project_xy(X, Y, Z, k.focal, k.principal_x, k.principal_y))


def transform_point(P, m: RigidTransform) -> np.ndarray:
    X, Y, Z = (float(c) for c in P)
    return np.array(_rigid_xyz(m.rotation, m.translation, X, Y, Z))


def ego_displacement_at(p, z: float, m: RigidTransform, k: Intrinsics) -> np.ndarray:
    """Ego flow over one frame interval, ``p_t - p_t'``.

    Returns ``(nan, nan)`` when the point falls behind the prior camera.
    """
    if not z > 0:
        raise ValueError(f"depth must be positive, got {z}")
    x, y = float(p[0]), float(p[1])
    X, Y, Z = _backproject_xyz(x, y, float(z), k.focal, k.principal_x, k.principal_y)
    X2, Y2, Z2 = _rigid_xyz(m.rotation, m.translation, X, Y, Z)
    if not Z2 > 0:
        return np.array([np.nan, np.nan])
    x2, y2 = _project_xy(X2, Y2, Z2, k.focal, k.principal_x, k.principal_y)
    return np.array([x - x2, y - y2])


def ego_flow_at(p, z: float, m: RigidTransform, k: Intrinsics, dt: float = 1.0) -> np.ndarray:
    """Ego flow in px/s at pixel ``p`` with depth ``z``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return ego_displacement_at(p, z, m, k) / dt


def ego_flow_field(
    depth: DepthField,
    m: RigidTransform,
    k: Intrinsics,
    dt: float = 1.0,
    far_depth: float = DEFAULT_FAR_DEPTH,
) -> FlowField:
    """Ego flow for every pixel of ``depth``.

    Pixels without a hit are evaluated at ``far_depth`` and flagged invalid, as
    are pixels whose scene point lands behind the prior camera (those carry 0).
    """
    if depth.width != k.width or depth.height != k.height:
        raise ValueError(
            f"depth is {depth.width}x{depth.height} but intrinsics expect {k.width}x{k.height}"
        )
    hit = depth.hit_mask
    z = np.where(hit, depth.data, far_depth)
    x, y = k.pixel_grid()
    X, Y, Z = _backproject_xyz(x, y, z, k.focal, k.principal_x, k.principal_y)
    X2, Y2, Z2 = _rigid_xyz(m.rotation, m.translation, X, Y, Z)
    in_front = Z2 > 0
    Z2 = np.where(in_front, Z2, 1.0)
    x2, y2 = _project_xy(X2, Y2, Z2, k.focal, k.principal_x, k.principal_y)
    data = np.stack([x - x2, y - y2], axis=-1)
    data[~in_front] = 0.0
    return FlowField(data, dt, hit & in_front)


def _check_compatible(a: FlowField, b: FlowField):
    if a.data.shape != b.data.shape:
        raise ValueError(f"flow shapes differ: {a.data.shape} vs {b.data.shape}")
    if a.dt != b.dt:
        raise ValueError(f"flow dt differs: {a.dt} vs {b.dt}")


def factorize(raw: FlowField, ego: FlowField) -> FlowField:
    """Object flow: the residual of raw flow once ego flow is removed."""
    _check_compatible(raw, ego)
    return FlowField(raw.data - ego.data, raw.dt, raw.valid & ego.valid)
