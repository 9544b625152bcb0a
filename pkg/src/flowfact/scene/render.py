"""Software raycaster producing depth, segmentation and ground-truth flow."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import DepthField, FlowField, Intrinsics, RigidTransform, rotation_x
from .layout import BACKGROUND, GROUND_ID, EnvironmentSpec

_EPS = 1e-9


def camera_pose(position, heading: float, height: float = 1.2, pitch_deg: float = 0.0) -> RigidTransform:
    """Camera-to-world transform for a camera at ``position`` facing ``heading``.

    Camera axes: x right, y down, z forward; world is x east, y north, z up.
    Positive pitch tilts the optical axis downwards.
    """
    c, s = math.cos(heading), math.sin(heading)
    level = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
    rot = level @ rotation_x(-math.radians(pitch_deg))
    return RigidTransform(rot, np.array([position[0], position[1], height]))


def camera_motion(prev_pose: RigidTransform, curr_pose: RigidTransform) -> RigidTransform:
    """Transform from current camera coordinates to prior camera coordinates."""
    return prev_pose.inverse() @ curr_pose


@dataclass
class RenderFrame:
    depth: DepthField
    seg: np.ndarray  # (H, W) int32 class ids, 0 = background
    object_ids: np.ndarray  # (H, W) int32, -1 = no hit, 0 = ground
    local_points: np.ndarray  # (H, W, 3) hit point in the hit object's frame
    camera: RigidTransform  # camera -> world
    object_poses: dict[int, RigidTransform]  # object -> world at this frame's time
    time: float


def _ray_grid(k: Intrinsics) -> np.ndarray:
    x, y = k.pixel_grid()
    # Unnormalised so that the ray parameter equals camera-frame depth.
    return np.stack([(x - k.principal_x) / k.focal, (y - k.principal_y) / k.focal, np.ones_like(x)], axis=-1)


def raycast_render(spec: EnvironmentSpec, camera: RigidTransform, t: float, k: Intrinsics | None = None) -> RenderFrame:
    """Render the scene at time ``t`` from ``camera`` (camera-to-world)."""
    k = k or spec.config.intrinsics()
    h, w = k.height, k.width
    dirs_cam = _ray_grid(k).reshape(-1, 3)
    R = camera.rotation
    dirs = dirs_cam @ R.T
    origin = camera.translation
    n = dirs.shape[0]

    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)

    # Ground plane z = 0.
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dz < -_EPS, -origin[2] / dz, np.inf)
    hit = np.isfinite(tg) & (tg > _EPS)
    best_t[hit] = tg[hit]
    best_id[hit] = GROUND_ID

    poses = spec.object_poses(t)
    cyls = [o for o in spec.objects if o.shape == "cylinder"]
    boxes = [o for o in spec.objects if o.shape == "box"]

    if cyls:
        centres = np.array([poses[o.id].translation[:2] for o in cyls])  # (M, 2)
        radius = np.array([o.size[0] for o in cyls])
        height = np.array([o.size[2] for o in cyls])
        ox = origin[0] - centres[:, 0]
        oy = origin[1] - centres[:, 1]
        dx, dy = dirs[:, 0:1], dirs[:, 1:2]
        a = dx * dx + dy * dy
        b = 2 * (dx * ox + dy * oy)
        c = ox * ox + oy * oy - radius * radius
        disc = b * b - 4 * a * c
        with np.errstate(invalid="ignore", divide="ignore"):
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            t0 = (-b - sq) / (2 * a)
            t1 = (-b + sq) / (2 * a)
        tc = np.full(disc.shape, np.inf)
        for cand in (t1, t0):
            z = origin[2] + cand * dirs[:, 2:3]
            ok = (cand > _EPS) & (z >= 0) & (z <= height)
            tc = np.where(ok, cand, tc)
        # Top caps.
        with np.errstate(divide="ignore", invalid="ignore"):
            tcap = (height - origin[2]) / dirs[:, 2:3]
        px = origin[0] + tcap * dx - centres[:, 0]
        py = origin[1] + tcap * dy - centres[:, 1]
        ok = (tcap > _EPS) & (px * px + py * py <= radius * radius)
        tc = np.where(ok & (tcap < tc), tcap, tc)
        j = np.argmin(tc, axis=1)
        tmin = tc[np.arange(n), j]
        closer = tmin < best_t
        best_t[closer] = tmin[closer]
        best_id[closer] = np.array([o.id for o in cyls])[j[closer]]

    if boxes:
        tb = np.full((n, len(boxes)), np.inf)
        for col, o in enumerate(boxes):
            pose = poses[o.id]
            rt = pose.rotation.T
            lo = rt @ (origin - pose.translation)
            ld = dirs @ rt.T
            half = np.array([o.size[0] / 2, o.size[1] / 2, o.size[2] / 2])
            centre = np.array([0.0, 0.0, half[2]])
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / ld
                t_lo = (centre - half - lo) * inv
                t_hi = (centre + half - lo) * inv
            t_lo = np.where(np.isnan(t_lo), -np.inf, t_lo)
            t_hi = np.where(np.isnan(t_hi), np.inf, t_hi)
            tnear = np.max(np.minimum(t_lo, t_hi), axis=1)
            tfar = np.min(np.maximum(t_lo, t_hi), axis=1)
            ok = (tnear <= tfar) & (tnear > _EPS)
            tb[ok, col] = tnear[ok]
        j = np.argmin(tb, axis=1)
        tmin = tb[np.arange(n), j]
        closer = tmin < best_t
        best_t[closer] = tmin[closer]
        best_id[closer] = np.array([o.id for o in boxes])[j[closer]]

    hit = np.isfinite(best_t)
    world = origin + best_t[:, None] * dirs
    world[~hit] = 0.0

    seg = np.full(n, BACKGROUND, dtype=np.int32)
    local = np.zeros((n, 3))
    ground = best_id == GROUND_ID
    seg[ground] = spec.ground_class(world[ground, :2])
    local[ground] = world[ground]
    by_id = {o.id: o for o in spec.objects}
    for oid in np.unique(best_id[best_id > 0]):
        sel = best_id == oid
        pose = poses[int(oid)]
        seg[sel] = by_id[int(oid)].class_id
        local[sel] = (world[sel] - pose.translation) @ pose.rotation

    depth = np.where(hit, best_t, np.inf).reshape(h, w)
    return RenderFrame(
        depth=DepthField(depth),
        seg=seg.reshape(h, w),
        object_ids=best_id.astype(np.int32).reshape(h, w),
        local_points=local.reshape(h, w, 3),
        camera=camera,
        object_poses=poses,
        time=t,
    )


def ground_truth_raw_flow(
    prev: RenderFrame,
    curr: RenderFrame,
    k: Intrinsics,
    dt: float = 1.0,
    far_depth: float = 100.0,
) -> FlowField:
    """Raw flow ``p_t - p_t'`` for every pixel of ``curr``.

    Each hit is carried back to the prior frame through its object's pose at
    that time, ignoring visibility. Pixels without a hit are treated as static
    points at ``far_depth`` and flagged invalid.
    """
    h, w = curr.depth.data.shape
    x, y = k.pixel_grid()
    ids = curr.object_ids
    hit = ids >= 0

    # Hit points in world coordinates at the prior time.
    max_id = max(prev.object_poses)
    rot = np.zeros((max_id + 1, 3, 3))
    trans = np.zeros((max_id + 1, 3))
    for oid, pose in prev.object_poses.items():
        rot[oid] = pose.rotation
        trans[oid] = pose.translation
    idx = np.where(hit, ids, 0)
    lp = curr.local_points
    R = rot[idx]
    T = trans[idx]
    world_prev = np.einsum("hwij,hwj->hwi", R, lp) + T

    # Misses: static points on the far plane along the current ray.
    z = far_depth
    far_cam = np.stack([z / k.focal * (x - k.principal_x), z / k.focal * (y - k.principal_y), np.full_like(x, z)], -1)
    far_world = curr.camera.apply(far_cam)
    world_prev = np.where(hit[..., None], world_prev, far_world)

    cam_prev = prev.camera.inverse().apply(world_prev)
    Z = cam_prev[..., 2]
    in_front = Z > 0
    Zs = np.where(in_front, Z, 1.0)
    xp = k.focal * cam_prev[..., 0] / Zs + k.principal_x
    yp = k.focal * cam_prev[..., 1] / Zs + k.principal_y
    data = np.stack([x - xp, y - yp], axis=-1)
    data[~in_front] = 0.0
    return FlowField(data, dt, hit & in_front)
