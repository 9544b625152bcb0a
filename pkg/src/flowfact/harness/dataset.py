"""Simulator frame export and offline factorization of flow files.

Exported and factorized flows are per-frame pixel displacements snapped to
``FILE_QUANTUM`` (2**-12 px). Values on that grid with magnitude below 2**11
are exact in float32, so ``ego + obj == raw`` holds bit for bit after a
float32 round trip. Pixels outside that range, or without a depth hit, are
marked invalid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .. import scene
from ..geometry import FILE_QUANTUM, DepthField, FlowField, ego_flow_field
from ..midlevel import MidlevelConfig, RepresentationId, factorized_flows, CameraRig
from ..scene.layout import SceneConfig
from . import formats
from .viz import save_flow_png, save_png

EXACT_LIMIT = 2.0**11


class DimensionMismatchError(formats.FileFormatError):
    pass


def snap(data: np.ndarray, quantum: float = FILE_QUANTUM) -> np.ndarray:
    return np.round(np.asarray(data, dtype=np.float64) / quantum) * quantum


def _exact_mask(*arrays: np.ndarray) -> np.ndarray:
    ok = np.ones(arrays[0].shape[:2], dtype=bool)
    for a in arrays:
        ok &= np.all(np.abs(a) < EXACT_LIMIT, axis=-1)
    return ok


@dataclass
class Factorization:
    raw: np.ndarray  # float32, snapped
    ego: np.ndarray
    obj: np.ndarray
    valid: np.ndarray


def factorize_arrays(raw, depth, motion, k, far_depth: float = 100.0) -> Factorization:
    """Split a raw displacement field into ego and object parts on the file grid."""
    raw = np.asarray(raw)
    depth = np.asarray(depth, dtype=np.float64)
    ego = ego_flow_field(DepthField(depth), motion, k, 1.0, far_depth)
    raw_q = snap(raw)
    ego_q = snap(ego.data)
    obj_q = raw_q - ego_q
    valid = ego.valid & _exact_mask(raw_q, ego_q, obj_q)
    return Factorization(raw_q.astype(np.float32), ego_q.astype(np.float32), obj_q.astype(np.float32), valid)


def factorize_files(flow_path, depth_path, pose_path, intrinsics_path, out_prefix,
                    far_depth: float = 100.0, flow_scale: float | None = None) -> Factorization:
    """Read raw flow, depth, pose (current camera to prior camera) and intrinsics;
    write ``<prefix>_ego.flo``, ``<prefix>_obj.flo``, colour images and a validity mask."""
    raw = formats.read_flo(flow_path)
    depth = formats.read_depth(depth_path)
    motion = formats.read_pose(pose_path)
    k = formats.read_intrinsics(intrinsics_path)
    expected = (k.height, k.width)
    if raw.shape[:2] != expected:
        raise DimensionMismatchError(flow_path, 4, f"flow is {raw.shape[1]}x{raw.shape[0]}, intrinsics say {k.width}x{k.height}")
    if depth.shape != expected:
        raise DimensionMismatchError(depth_path, 4, f"depth is {depth.shape[1]}x{depth.shape[0]}, intrinsics say {k.width}x{k.height}")
    result = factorize_arrays(raw, depth, motion, k, far_depth)
    out_prefix = str(out_prefix)
    Path(out_prefix).parent.mkdir(parents=True, exist_ok=True)
    formats.write_flo(out_prefix + "_ego.flo", result.ego)
    formats.write_flo(out_prefix + "_obj.flo", result.obj)
    scale = flow_scale or max(float(np.max(np.hypot(*np.moveaxis(result.raw, -1, 0)))), 1e-6)
    save_flow_png(out_prefix + "_ego.png", result.ego, scale)
    save_flow_png(out_prefix + "_obj.png", result.obj, scale)
    save_png(out_prefix + "_valid.png", (result.valid * 255).astype(np.uint8))
    return result


def export_dataset(
    out_dir,
    environment: str = "StraightRoad",
    fps: float = 12.0,
    frames: int = 10,
    seed: int = 0,
    speed: str = "normal",
    static: bool = False,
    scene_config: SceneConfig | None = None,
    far_depth: float = 100.0,
) -> list[dict]:
    """Drive the agent straight ahead (no-op) and export ``frames`` consecutive frame pairs.

    Each pair ``i`` writes ``frame_i.{raw,ego,obj}.flo``, ``frame_i.depth.dpf``
    (current frame), ``frame_i.seg.png`` (class ids), ``frame_i.pose.txt``
    (current camera to prior camera) and ``frame_i.{raw,ego,obj}.png``.
    ``static`` freezes every pedestrian in place.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = scene_config or SceneConfig()
    k = cfg.intrinsics()
    mcfg = MidlevelConfig(far_depth=far_depth)
    formats.write_intrinsics(out / "intrinsics.txt", k)
    records = []
    episode = 0
    state = prev = None
    while len(records) < frames:
        if state is None or state.done:
            spec = scene.build_environment(environment, speed, fps, seed + episode, cfg)
            if static:
                spec = spec.frozen()
            episode += 1
            state = scene.reset(spec)
            prev = scene.render(state)
        state, _, _, _ = scene.step(state, scene.Action.NO_OP)
        curr = scene.render(state)
        motion = scene.camera_motion(prev.camera, curr.camera)
        flows = factorized_flows(prev, curr, CameraRig(k, motion, 1.0 / fps), mcfg)
        raw_q = snap(flows[RepresentationId.FLOW_RAW].data)
        ego_q = snap(flows[RepresentationId.FLOW_EGO].data)
        obj_q = raw_q - ego_q
        valid = (flows[RepresentationId.FLOW_RAW].valid & flows[RepresentationId.FLOW_EGO].valid
                 & _exact_mask(raw_q, ego_q, obj_q))
        i = len(records)
        stem = out / f"frame_{i:04d}"
        for name, data in (("raw", raw_q), ("ego", ego_q), ("obj", obj_q)):
            formats.write_flo(f"{stem}.{name}.flo", data)
        scale = max(float(np.max(np.hypot(raw_q[..., 0], raw_q[..., 1]))), 1e-6)
        for name, data in (("raw", raw_q), ("ego", ego_q), ("obj", obj_q)):
            save_flow_png(f"{stem}.{name}.png", data, scale)
        formats.write_depth(f"{stem}.depth.dpf", curr.depth.data)
        save_png(f"{stem}.seg.png", curr.seg.astype(np.uint8))
        save_png(f"{stem}.valid.png", (valid * 255).astype(np.uint8))
        formats.write_pose(f"{stem}.pose.txt", motion)
        records.append({"index": i, "episode": episode - 1, "step": state.steps, "time": state.time,
                        "valid_pixels": int(valid.sum())})
        prev = curr
    manifest = {
        "environment": environment, "fps": fps, "frames": frames, "seed": seed, "speed": speed,
        "static": static, "far_depth": far_depth, "scene": asdict(cfg), "records": records,
        "units": "pixels per frame",
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2))
    return records


def load_frame(out_dir, index: int) -> dict[str, np.ndarray]:
    stem = Path(out_dir) / f"frame_{index:04d}"
    return {
        "raw": formats.read_flo(f"{stem}.raw.flo"),
        "ego": formats.read_flo(f"{stem}.ego.flo"),
        "obj": formats.read_flo(f"{stem}.obj.flo"),
        "depth": formats.read_depth(f"{stem}.depth.dpf"),
        "seg": np.asarray(Image.open(f"{stem}.seg.png")),
        "valid": np.asarray(Image.open(f"{stem}.valid.png")) > 0,
        "pose": formats.read_pose(f"{stem}.pose.txt"),
    }
