"""Readers and writers for flow, depth, pose and intrinsics files.

Flow files use the Middlebury ``.flo`` layout: float32 tag 202021.25, int32
width, int32 height, then row-major interleaved float32 (u, v). Depth files
use a ``DPF1`` magic, int32 width and height, then row-major float32 metres
with misses stored as +inf. All binary values are little-endian.

Pose and intrinsics files are plain ``key: values`` text.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..geometry import DepthField, FlowField, Intrinsics, RigidTransform

FLO_TAG = 202021.25
DEPTH_MAGIC = b"DPF1"
_FLO_HEADER = struct.Struct("<fii")
_DEPTH_HEADER = struct.Struct("<4sii")


class FileFormatError(ValueError):
    """Malformed input file; carries the path and byte offset (or line number)."""

    def __init__(self, path, offset: int, message: str, unit: str = "offset"):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: {unit} {offset}: {message}")


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def _check_dims(path, width: int, height: int) -> None:
    if width <= 0 or height <= 0 or width > 1 << 15 or height > 1 << 15:
        raise FileFormatError(path, 4, f"implausible dimensions {width}x{height}")


def write_flo(path, flow: FlowField | np.ndarray) -> None:
    data = flow.data if isinstance(flow, FlowField) else np.asarray(flow)
    if data.ndim != 3 or data.shape[2] != 2:
        raise ValueError(f"flow must be HxWx2, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(_FLO_HEADER.pack(FLO_TAG, w, h))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Return an HxWx2 float32 array."""
    buf = _read_bytes(path)
    if len(buf) < _FLO_HEADER.size:
        raise FileFormatError(path, len(buf), "truncated header")
    tag, w, h = _FLO_HEADER.unpack_from(buf)
    if tag != np.float32(FLO_TAG):
        raise FileFormatError(path, 0, f"bad flow tag {tag!r}, expected {FLO_TAG}")
    _check_dims(path, w, h)
    need = _FLO_HEADER.size + 8 * w * h
    if len(buf) < need:
        raise FileFormatError(path, len(buf), f"truncated data, expected {need} bytes")
    if len(buf) > need:
        raise FileFormatError(path, need, f"{len(buf) - need} trailing bytes")
    return np.frombuffer(buf, dtype="<f4", offset=_FLO_HEADER.size).reshape(h, w, 2).astype(np.float32)


def write_depth(path, depth: DepthField | np.ndarray) -> None:
    data = depth.data if isinstance(depth, DepthField) else np.asarray(depth)
    if data.ndim != 2:
        raise ValueError(f"depth must be HxW, got {data.shape}")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    """Return an HxW float32 array of metres (+inf for misses)."""
    buf = _read_bytes(path)
    if len(buf) < _DEPTH_HEADER.size:
        raise FileFormatError(path, len(buf), "truncated header")
    magic, w, h = _DEPTH_HEADER.unpack_from(buf)
    if magic != DEPTH_MAGIC:
        raise FileFormatError(path, 0, f"bad magic {magic!r}, expected {DEPTH_MAGIC!r}")
    _check_dims(path, w, h)
    need = _DEPTH_HEADER.size + 4 * w * h
    if len(buf) < need:
        raise FileFormatError(path, len(buf), f"truncated data, expected {need} bytes")
    if len(buf) > need:
        raise FileFormatError(path, need, f"{len(buf) - need} trailing bytes")
    data = np.frombuffer(buf, dtype="<f4", offset=_DEPTH_HEADER.size).reshape(h, w).astype(np.float32)
    bad = ~((data > 0) | np.isposinf(data))
    if bad.any():
        i = int(np.flatnonzero(bad.ravel())[0])
        raise FileFormatError(path, _DEPTH_HEADER.size + 4 * i, f"depth must be positive or +inf, got {data.flat[i]}")
    return data


# -- text files ---------------------------------------------------------------

_POSE_FIELDS = {"rotation": 9, "translation": 3}
_INTRINSICS_FIELDS = {"focal": 1, "principal": 2, "size": 2}


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _parse_fields(path, fields: dict[str, int]) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if ":" not in text:
            raise FileFormatError(path, lineno, f"expected 'name: values', got {text!r}", "line")
        key, rest = (s.strip() for s in text.split(":", 1))
        if key not in fields:
            raise FileFormatError(path, lineno, f"unknown field {key!r}", "line")
        if key in out:
            raise FileFormatError(path, lineno, f"duplicate field {key!r}", "line")
        try:
            values = [float(v) for v in rest.split()]
        except ValueError as exc:
            raise FileFormatError(path, lineno, f"non-numeric value in {key!r}: {exc}", "line") from None
        if len(values) != fields[key]:
            raise FileFormatError(path, lineno, f"{key!r} needs {fields[key]} numbers, got {len(values)}", "line")
        out[key] = values
    missing = [k for k in fields if k not in out]
    if missing:
        raise FileFormatError(path, 0, f"missing fields {missing}", "line")
    return out


def write_pose(path, pose: RigidTransform) -> None:
    """Write a current-camera to prior-camera transform."""
    Path(path).write_text(
        f"rotation: {_fmt(pose.rotation.ravel())}\ntranslation: {_fmt(pose.translation)}\n"
    )


def read_pose(path) -> RigidTransform:
    f = _parse_fields(path, _POSE_FIELDS)
    try:
        return RigidTransform(np.array(f["rotation"]).reshape(3, 3), np.array(f["translation"]))
    except ValueError as exc:
        raise FileFormatError(path, 1, str(exc), "line") from None


def write_intrinsics(path, k: Intrinsics) -> None:
    Path(path).write_text(
        f"focal: {float(k.focal)!r}\n"
        f"principal: {_fmt((k.principal_x, k.principal_y))}\n"
        f"size: {k.width} {k.height}\n"
    )


def read_intrinsics(path) -> Intrinsics:
    f = _parse_fields(path, _INTRINSICS_FIELDS)
    w, h = f["size"]
    if w != int(w) or h != int(h):
        raise FileFormatError(path, 0, "size must be integers", "line")
    try:
        return Intrinsics(f["focal"][0], f["principal"][0], f["principal"][1], int(w), int(h))
    except ValueError as exc:
        raise FileFormatError(path, 0, str(exc), "line") from None
