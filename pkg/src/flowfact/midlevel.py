"""Observation stacks assembled from rendered frames.

A representation spec such as ``"ego+obj+seg2"`` selects which planes the agent
sees. Every plane is an (H, W, C) float32 array normalised to roughly [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import PIPELINE_QUANTUM, FlowField, Intrinsics, RigidTransform, ego_flow_field, factorize
from .scene.render import RenderFrame, ground_truth_raw_flow


class RepresentationId(str, Enum):
    SEG = "seg"
    DEPTH = "depth"
    FLOW_RAW = "raw"
    FLOW_EGO = "ego"
    FLOW_OBJ = "obj"
    SEG2 = "seg2"
    DEPTH2 = "depth2"


BASE_IDS = (
    RepresentationId.SEG,
    RepresentationId.DEPTH,
    RepresentationId.FLOW_RAW,
    RepresentationId.FLOW_EGO,
    RepresentationId.FLOW_OBJ,
)
FLOW_IDS = (RepresentationId.FLOW_RAW, RepresentationId.FLOW_EGO, RepresentationId.FLOW_OBJ)

_ALIASES = {
    "seg": RepresentationId.SEG,
    "depth": RepresentationId.DEPTH,
    "raw": RepresentationId.FLOW_RAW,
    "flow_raw": RepresentationId.FLOW_RAW,
    "ego": RepresentationId.FLOW_EGO,
    "flow_ego": RepresentationId.FLOW_EGO,
    "obj": RepresentationId.FLOW_OBJ,
    "flow_obj": RepresentationId.FLOW_OBJ,
    "seg2": RepresentationId.SEG2,
    "depth2": RepresentationId.DEPTH2,
}


class RepresentationSpecError(ValueError):
    def __init__(self, token: str, message: str):
        super().__init__(message)
        self.token = token


def parse_spec(text: str | list | tuple) -> tuple[RepresentationId, ...]:
    """Parse ``"ego+obj+seg2"`` (``+`` or ``,`` separated) into representation ids."""
    if isinstance(text, (list, tuple)):
        tokens = [t.value if isinstance(t, RepresentationId) else str(t) for t in text]
    else:
        tokens = [t for t in text.replace(",", "+").split("+")]
    out: list[RepresentationId] = []
    for raw in tokens:
        token = raw.strip().lower()
        if token not in _ALIASES:
            raise RepresentationSpecError(raw, f"unknown representation {raw.strip()!r} in {text!r}")
        rid = _ALIASES[token]
        if rid in out:
            raise RepresentationSpecError(raw, f"representation {raw.strip()!r} listed twice in {text!r}")
        out.append(rid)
    if not out:
        raise RepresentationSpecError("", "empty representation spec")
    return tuple(out)


def spec_string(spec) -> str:
    return "+".join(r.value for r in spec)


@dataclass(frozen=True)
class MidlevelConfig:
    far_depth: float = 100.0
    flow_scale: float = 20.0  # px per frame (or px/s when flow_units == "per_second")
    flow_units: str = "per_frame"
    seg_encoding: str = "index"  # index | onehot
    num_classes: int = 5

    def __post_init__(self):
        if self.flow_units not in ("per_frame", "per_second"):
            raise ValueError(f"flow_units must be per_frame or per_second, got {self.flow_units!r}")
        if self.seg_encoding not in ("index", "onehot"):
            raise ValueError(f"seg_encoding must be index or onehot, got {self.seg_encoding!r}")


def channels(rid: RepresentationId, config: MidlevelConfig | None = None) -> int:
    config = config or MidlevelConfig()
    seg_c = config.num_classes + 1 if config.seg_encoding == "onehot" else 1
    return {
        RepresentationId.SEG: seg_c,
        RepresentationId.DEPTH: 1,
        RepresentationId.FLOW_RAW: 2,
        RepresentationId.FLOW_EGO: 2,
        RepresentationId.FLOW_OBJ: 2,
        RepresentationId.SEG2: 2 * seg_c,
        RepresentationId.DEPTH2: 2,
    }[rid]


@dataclass(frozen=True)
class CameraRig:
    intrinsics: Intrinsics
    motion: RigidTransform  # current camera -> prior camera
    dt: float = 1.0


@dataclass
class Observation:
    planes: list[tuple[RepresentationId, np.ndarray]]
    step_index: int = 0
    flows: dict[RepresentationId, FlowField] = field(default_factory=dict, repr=False)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {rid.value: arr for rid, arr in self.planes}

    def plane(self, rid: RepresentationId) -> np.ndarray:
        for r, arr in self.planes:
            if r == rid:
                return arr
        raise KeyError(rid)

    @property
    def num_channels(self) -> int:
        return sum(arr.shape[2] for _, arr in self.planes)


def normalize(plane: np.ndarray, rid: RepresentationId, config: MidlevelConfig | None = None) -> np.ndarray:
    config = config or MidlevelConfig()
    plane = np.asarray(plane, dtype=np.float64)
    if rid in (RepresentationId.DEPTH, RepresentationId.DEPTH2):
        return np.clip(plane, 0.0, config.far_depth) / config.far_depth
    if rid in FLOW_IDS:
        return np.clip(plane / config.flow_scale, -1.0, 1.0)
    if rid in (RepresentationId.SEG, RepresentationId.SEG2):
        if config.seg_encoding == "onehot":
            ids = plane.astype(np.int64)
            return (ids[..., None] == np.arange(config.num_classes + 1)).astype(np.float64).reshape(
                *ids.shape[:-1], -1
            )
        return plane / config.num_classes
    raise RepresentationSpecError(str(rid), f"unknown representation {rid!r}")


def factorized_flows(
    prev: RenderFrame | None, curr: RenderFrame, rig: CameraRig, config: MidlevelConfig | None = None
) -> dict[RepresentationId, FlowField]:
    """Raw, ego and object flow for a frame pair, snapped to the pipeline grid."""
    config = config or MidlevelConfig()
    k = rig.intrinsics
    if curr.depth.width != k.width or curr.depth.height != k.height:
        raise ValueError("frame size does not match intrinsics")
    if prev is None:
        zero = FlowField(np.zeros((k.height, k.width, 2)), rig.dt)
        return {r: zero for r in FLOW_IDS}
    raw = ground_truth_raw_flow(prev, curr, k, rig.dt, config.far_depth).quantized(PIPELINE_QUANTUM)
    ego = ego_flow_field(curr.depth, rig.motion, k, rig.dt, config.far_depth).quantized(PIPELINE_QUANTUM)
    obj = factorize(raw, ego)
    return {RepresentationId.FLOW_RAW: raw, RepresentationId.FLOW_EGO: ego, RepresentationId.FLOW_OBJ: obj}


def compose(
    spec,
    frames: tuple[RenderFrame | None, RenderFrame],
    rig: CameraRig,
    config: MidlevelConfig | None = None,
    step_index: int = 0,
) -> Observation:
    """Build the observation planes requested by ``spec`` from (previous, current) frames.

    With no previous frame, flows are zero and two-frame stacks repeat the
    current frame.
    """
    config = config or MidlevelConfig()
    ids = parse_spec(spec)
    prev, curr = frames
    prev_for_stack = prev if prev is not None else curr
    if prev_for_stack.depth.data.shape != curr.depth.data.shape:
        raise ValueError("frames differ in size")
    flows = {}
    if any(r in FLOW_IDS for r in ids):
        flows = factorized_flows(prev, curr, rig, config)
    planes = []
    for rid in ids:
        if rid == RepresentationId.SEG:
            plane = normalize(curr.seg[..., None], rid, config)
        elif rid == RepresentationId.DEPTH:
            plane = normalize(curr.depth.data[..., None], rid, config)
        elif rid == RepresentationId.SEG2:
            plane = np.concatenate(
                [normalize(f.seg[..., None], rid, config) for f in (prev_for_stack, curr)], axis=-1
            )
        elif rid == RepresentationId.DEPTH2:
            plane = normalize(np.stack([prev_for_stack.depth.data, curr.depth.data], axis=-1), rid, config)
        else:
            f = flows[rid]
            data = f.per_second() if config.flow_units == "per_second" else f.data
            plane = normalize(data, rid, config)
        planes.append((rid, plane.astype(np.float32)))
    return Observation(planes, step_index, flows)
