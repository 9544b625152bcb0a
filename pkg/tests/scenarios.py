"""Randomised simulator set-ups shared by the harness and acceptance tests."""

import math
from dataclasses import replace

import numpy as np

from flowfact import scene
from flowfact.midlevel import CameraRig, MidlevelConfig, RepresentationId, factorized_flows
from flowfact.scene.layout import PedestrianRoute, SceneConfig, SceneObject
from flowfact.geometry import RigidTransform

OBJ_THRESHOLD = 1e-3


def moving_pedestrian_spec(rng, config=None):
    """One walking pedestrian in front of a parked camera on Straight Road.

    Returns ``(spec, camera)``. Distance, bearing, walking direction and speed
    are drawn at random; the camera sits at a random spot and heading.
    """
    cfg = replace(config or SceneConfig(), pedestrians=False)
    spec = scene.build_environment("StraightRoad", "normal", 12, int(rng.integers(1 << 30)), cfg)
    cam_pos = (rng.uniform(0.0, 60.0), rng.uniform(-3.0, 3.0))
    heading = rng.uniform(-math.pi, math.pi)
    half_fov = math.radians(cfg.hfov_deg) / 2
    dist = rng.uniform(3.0, 12.0)
    bearing = heading + rng.uniform(-0.7, 0.7) * half_fov
    centre = np.array([cam_pos[0] + dist * math.cos(bearing), cam_pos[1] + dist * math.sin(bearing)])
    walk = rng.uniform(-math.pi, math.pi)
    u = np.array([math.cos(walk), math.sin(walk)])
    speed = rng.uniform(0.6, 2.4)
    route = PedestrianRoute(tuple(centre - 5 * u), tuple(centre + 5 * u), "perpendicular", speed, 5.0)
    v = route.velocity(0.0)
    pose = RigidTransform(np.eye(3), np.array([centre[0], centre[1], 0.0]))
    ped = SceneObject(10_000, spec.class_id("pedestrian"), "cylinder",
                      (cfg.pedestrian_radius, cfg.pedestrian_radius, cfg.pedestrian_height), pose,
                      (float(v[0]), float(v[1]), 0.0), True, 0)
    spec = replace(spec, objects=spec.objects + (ped,), pedestrian_routes=(route,))
    return spec, scene.camera_pose(cam_pos, heading, cfg.camera_height)


def pedestrian_iou(spec, camera, dt=1 / 12):
    """IoU between ``|F_obj| > OBJ_THRESHOLD`` and the pedestrian mask of the current frame.

    Returns None when the pedestrian is not visible.
    """
    k = spec.config.intrinsics()
    prev = scene.raycast_render(spec, camera, 0.0, k)
    curr = scene.raycast_render(spec, camera, dt, k)
    flows = factorized_flows(prev, curr, CameraRig(k, RigidTransform.identity(), 1.0), MidlevelConfig())
    obj = flows[RepresentationId.FLOW_OBJ].data
    moving = np.hypot(obj[..., 0], obj[..., 1]) > OBJ_THRESHOLD
    mask = curr.seg == spec.class_id("pedestrian")
    if not mask.any():
        return None
    return float((moving & mask).sum() / (moving | mask).sum())
