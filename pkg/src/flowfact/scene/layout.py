"""Environment layouts: roads, zones, static obstacles and pedestrian routes.

World frame: x east, y north, z up, metres. Roads are unions of straight
segments with a common width; interior polyline vertices get a disc so bends
have no gaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import Intrinsics, RigidTransform, rotation_z

ENVIRONMENTS = ("StraightRoad", "STurn", "HShapedPathways", "ThreeWayJunction")

# Per-environment episode limits, path counts and motion limits.
TIME_LIMITS = {"StraightRoad": 200, "STurn": 250, "HShapedPathways": 300, "ThreeWayJunction": 250}
PATH_COUNTS = {"StraightRoad": 1, "STurn": 2, "HShapedPathways": 4, "ThreeWayJunction": 2}
LANE_WIDTHS = {"StraightRoad": 2.0, "STurn": 1.5, "HShapedPathways": 2.0, "ThreeWayJunction": 1.0}
TURN_ACCEL_DEG = {"StraightRoad": 35.0, "STurn": 70.0, "HShapedPathways": 70.0, "ThreeWayJunction": 70.0}

# Class ids are 1-based positions in these tuples; 0 is background (no hit).
CATEGORIES = {
    "StraightRoad": ("road", "sidewalk", "building", "pedestrian", "ending_zone"),
    "STurn": ("road", "sidewalk", "building", "pedestrian", "ending_zone", "terrain"),
    "HShapedPathways": ("road", "sidewalk", "building", "pedestrian", "ending_zone", "terrain", "tree"),
    "ThreeWayJunction": (
        "road", "sidewalk", "building", "pedestrian", "ending_zone", "terrain",
        "tree", "fence", "car", "traffic_light", "pole",
    ),
}
BACKGROUND = 0
GROUND_ID = 0

# Road widths are lane_width * lanes; lane counts are chosen so that the
# configured turning accelerations can negotiate each layout at 10 m/s.
DEFAULT_LANES = {"StraightRoad": 2, "STurn": 4, "HShapedPathways": 4, "ThreeWayJunction": 8}


@dataclass(frozen=True)
class SpeedMode:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo <= self.hi:
            raise ValueError(f"invalid speed range [{self.lo}, {self.hi}]")


SPEED_MODES = {
    "low": SpeedMode(0.6, 1.0),
    "normal": SpeedMode(1.2, 1.8),
    "high": SpeedMode(2.0, 2.4),
}


def speed_mode(mode: str | SpeedMode) -> SpeedMode:
    if isinstance(mode, SpeedMode):
        return mode
    try:
        return SPEED_MODES[mode]
    except KeyError:
        raise ValueError(f"unknown speed mode {mode!r}; expected one of {sorted(SPEED_MODES)}") from None


@dataclass(frozen=True)
class SceneConfig:
    """Simulator defaults that the environment descriptions leave open."""

    width: int = 64
    height: int = 64
    hfov_deg: float = 90.0
    camera_height: float = 1.2
    camera_pitch_deg: float = 0.0
    far_depth: float = 100.0
    segment_length: float = 40.0
    sidewalk_width: float = 2.5
    lanes: int | None = None
    agent_radius: float = 0.4
    pedestrian_radius: float = 0.3
    pedestrian_height: float = 1.7
    forward_speed: float = 10.0
    max_angular_velocity_deg: float = 90.0
    angular_decay: float = 0.95
    time_limit: int | None = None
    pedestrians: bool = True
    buildings: bool = True

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.width, self.height, self.hfov_deg)


@dataclass(frozen=True)
class Segment:
    a: tuple[float, float]
    b: tuple[float, float]


@dataclass(frozen=True)
class NavPath:
    waypoints: tuple[tuple[float, float], ...]
    end_zone_length: float = 4.0

    @property
    def start_heading(self) -> float:
        (x0, y0), (x1, y1) = self.waypoints[0], self.waypoints[1]
        return math.atan2(y1 - y0, x1 - x0)

    def end_zone(self, road_width: float) -> tuple[np.ndarray, float, float, float]:
        """(centre, heading, half_length, half_width) of the ending zone rectangle."""
        (x0, y0), (x1, y1) = self.waypoints[-2], self.waypoints[-1]
        h = math.atan2(y1 - y0, x1 - x0)
        half = self.end_zone_length / 2
        centre = np.array([x1 - half * math.cos(h), y1 - half * math.sin(h)])
        return centre, h, half, road_width / 2


@dataclass(frozen=True)
class PedestrianRoute:
    """Ping-pong walk along a straight line; ``speed == 0`` means standing still."""

    a: tuple[float, float]
    b: tuple[float, float]
    direction: str  # perpendicular | parallel | static
    speed: float
    phase: float

    @property
    def length(self) -> float:
        return math.dist(self.a, self.b)

    def position(self, t: float) -> np.ndarray:
        a, b = np.asarray(self.a), np.asarray(self.b)
        length = self.length
        if length == 0.0:
            return a.astype(np.float64)
        s = (self.phase + self.speed * t) % (2 * length)
        s = s if s <= length else 2 * length - s
        return a + (b - a) * (s / length)

    def velocity(self, t: float) -> np.ndarray:
        length = self.length
        if length == 0.0 or self.speed == 0.0:
            return np.zeros(2)
        u = (np.asarray(self.b) - np.asarray(self.a)) / length
        s = (self.phase + self.speed * t) % (2 * length)
        return u * self.speed * (1.0 if s <= length else -1.0)


@dataclass(frozen=True)
class SceneObject:
    id: int
    class_id: int
    shape: str  # box | cylinder
    size: tuple[float, float, float]  # box: (length, width, height); cylinder: (radius, radius, height)
    pose: RigidTransform  # object -> world at t = 0; origin at the base centre
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    is_dynamic: bool = False
    route: int | None = None

    @property
    def yaw(self) -> float:
        r = self.pose.rotation
        return math.atan2(r[1, 0], r[0, 0])


@dataclass
class EnvironmentSpec:
    name: str
    time_limit: int
    paths: tuple[NavPath, ...]
    active_path: int
    lane_width: float
    road_width: float
    segments: tuple[Segment, ...]
    joints: tuple[tuple[float, float], ...]
    objects: tuple[SceneObject, ...]
    pedestrian_routes: tuple[PedestrianRoute, ...]
    fps: float
    speed_mode: SpeedMode
    turn_accel_deg: float
    categories: tuple[str, ...]
    seed: int
    config: SceneConfig = field(default_factory=SceneConfig)

    @property
    def dt(self) -> float:
        return 1.0 / self.fps

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    @property
    def path(self) -> NavPath:
        return self.paths[self.active_path]

    def class_id(self, category: str) -> int:
        return self.categories.index(category) + 1

    def object_pose(self, obj: SceneObject, t: float) -> RigidTransform:
        if obj.route is None:
            return obj.pose
        pos = self.pedestrian_routes[obj.route].position(t)
        return RigidTransform(obj.pose.rotation, np.array([pos[0], pos[1], 0.0]))

    def object_poses(self, t: float) -> dict[int, RigidTransform]:
        poses = {GROUND_ID: RigidTransform.identity()}
        for obj in self.objects:
            poses[obj.id] = self.object_pose(obj, t)
        return poses

    def frozen(self) -> "EnvironmentSpec":
        """Copy with every pedestrian standing still at its t = 0 position."""
        routes = tuple(replace(r, speed=0.0) for r in self.pedestrian_routes)
        objects = tuple(replace(o, velocity=(0.0, 0.0, 0.0), is_dynamic=False) for o in self.objects)
        return replace(self, pedestrian_routes=routes, objects=objects)

    # -- region predicates (vectorised over (..., 2) point arrays) ----------

    def _inside(self, pts: np.ndarray, half_width: float) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        inside = np.zeros(pts.shape[:-1], dtype=bool)
        for seg in self.segments:
            a, b = np.asarray(seg.a), np.asarray(seg.b)
            length = np.linalg.norm(b - a)
            u = (b - a) / length
            d = pts - a
            s = d[..., 0] * u[0] + d[..., 1] * u[1]
            lat = -d[..., 0] * u[1] + d[..., 1] * u[0]
            inside |= (s >= 0) & (s <= length) & (np.abs(lat) <= half_width)
        for j in self.joints:
            inside |= np.hypot(pts[..., 0] - j[0], pts[..., 1] - j[1]) <= half_width
        return inside

    def on_road(self, pts: np.ndarray) -> np.ndarray:
        return self._inside(pts, self.road_width / 2)

    def near_road(self, pts: np.ndarray, margin: float) -> np.ndarray:
        return self._inside(pts, self.road_width / 2 + margin)

    def in_end_zone(self, pts: np.ndarray, radius: float = 0.0) -> np.ndarray:
        """Whether a disc of ``radius`` at each point overlaps the ending zone."""
        centre, h, hl, hw = self.path.end_zone(self.road_width)
        pts = np.asarray(pts, dtype=np.float64)
        d = pts - centre
        s = d[..., 0] * math.cos(h) + d[..., 1] * math.sin(h)
        lat = -d[..., 0] * math.sin(h) + d[..., 1] * math.cos(h)
        dx = np.maximum(np.abs(s) - hl, 0.0)
        dy = np.maximum(np.abs(lat) - hw, 0.0)
        return np.hypot(dx, dy) <= radius

    def ground_class(self, pts: np.ndarray) -> np.ndarray:
        road = self.on_road(pts)
        sidewalk = self.near_road(pts, self.config.sidewalk_width)
        outside = self.class_id("terrain") if "terrain" in self.categories else self.class_id("sidewalk")
        cls = np.where(road, self.class_id("road"), np.where(sidewalk, self.class_id("sidewalk"), outside))
        return np.where(road & self.in_end_zone(pts), self.class_id("ending_zone"), cls).astype(np.int32)


# -- layout construction ------------------------------------------------------


def _polyline_segments(points) -> tuple[list[Segment], list[tuple[float, float]]]:
    segs = [Segment(tuple(points[i]), tuple(points[i + 1])) for i in range(len(points) - 1)]
    return segs, [tuple(p) for p in points[1:-1]]


def _straight_road(L):
    segs, joints = _polyline_segments([(-10.0, 0.0), (L + 10.0, 0.0)])
    paths = (NavPath(((2.0, 0.0), (L, 0.0))),)
    return segs, joints, paths


def _s_turn(L):
    s = L / 4
    pts = [(-10.0, 0.0), (s, 0.0), (2 * s, 0.7 * s), (3 * s, 0.7 * s), (4 * s, 0.0), (5 * s + 10.0, 0.0)]
    segs, joints = _polyline_segments(pts)
    fwd = ((2.0, 0.0), (s, 0.0), (2 * s, 0.7 * s), (3 * s, 0.7 * s), (4 * s, 0.0), (5 * s, 0.0))
    back = ((5 * s - 2.0, 0.0),) + tuple(reversed(fwd))[1:-1] + ((0.0, 0.0),)
    return segs, joints, (NavPath(fwd), NavPath(back))


def _h_shape(L):
    half = L / 2
    gap = 0.75 * L
    segs = [
        Segment((0.0, -half - 10.0), (0.0, half + 10.0)),
        Segment((gap, -half - 10.0), (gap, half + 10.0)),
        Segment((0.0, 0.0), (gap, 0.0)),
    ]
    paths = []
    for y0 in (-half, half):
        for y1 in (half, -half):
            paths.append(NavPath(((0.0, y0), (0.0, 0.0), (gap, 0.0), (gap, y1))))
    return segs, [], tuple(paths)


def _three_way(L):
    half = L / 2
    segs = [Segment((0.0, -L), (0.0, 0.0)), Segment((-half - 10.0, 0.0), (half + 10.0, 0.0))]
    paths = (
        NavPath(((0.0, -L + 2.0), (0.0, 0.0), (-half, 0.0))),
        NavPath(((0.0, -L + 2.0), (0.0, 0.0), (half, 0.0))),
    )
    return segs, [], paths


_LAYOUTS = {
    "StraightRoad": _straight_road,
    "STurn": _s_turn,
    "HShapedPathways": _h_shape,
    "ThreeWayJunction": _three_way,
}

# Which pedestrian kinds each environment contains.
_PEDESTRIANS = {
    "StraightRoad": {"perpendicular"},
    "STurn": {"perpendicular"},
    "HShapedPathways": {"perpendicular", "parallel", "static"},
    "ThreeWayJunction": {"parallel"},
}


def build_environment(
    name: str,
    speed: str | SpeedMode = "normal",
    fps: float = 12.0,
    seed: int = 0,
    config: SceneConfig | None = None,
) -> EnvironmentSpec:
    """Deterministically build one episode's environment for ``seed``."""
    if name not in _LAYOUTS:
        raise ValueError(f"unknown environment {name!r}; expected one of {ENVIRONMENTS}")
    if not 1 <= fps <= 60:
        raise ValueError(f"fps must lie in [1, 60], got {fps}")
    mode = speed_mode(speed)
    config = config or SceneConfig()
    rng = np.random.default_rng([seed, ENVIRONMENTS.index(name)])
    lanes = config.lanes or DEFAULT_LANES[name]
    lane_width = LANE_WIDTHS[name]
    road_width = lanes * lane_width
    segs, joints, paths = _LAYOUTS[name](config.segment_length)
    active = int(rng.integers(len(paths)))
    spec = EnvironmentSpec(
        name=name,
        time_limit=config.time_limit or TIME_LIMITS[name],
        paths=paths,
        active_path=active,
        lane_width=lane_width,
        road_width=road_width,
        segments=tuple(segs),
        joints=tuple(joints),
        objects=(),
        pedestrian_routes=(),
        fps=float(fps),
        speed_mode=mode,
        turn_accel_deg=TURN_ACCEL_DEG[name],
        categories=CATEGORIES[name],
        seed=seed,
        config=config,
    )
    objects: list[SceneObject] = []
    routes: list[PedestrianRoute] = []
    if config.pedestrians:
        _add_pedestrians(spec, rng, objects, routes)
    if config.buildings:
        _add_static(spec, rng, objects)
    spec.objects = tuple(objects)
    spec.pedestrian_routes = tuple(routes)
    return spec


def _box(obj_id, class_id, centre, yaw_angle, size):
    pose = RigidTransform(rotation_z(yaw_angle), np.array([centre[0], centre[1], 0.0]))
    return SceneObject(obj_id, class_id, "box", tuple(size), pose)


def _cylinder(obj_id, class_id, centre, radius, height, velocity=(0.0, 0.0, 0.0), route=None):
    pose = RigidTransform(np.eye(3), np.array([centre[0], centre[1], 0.0]))
    dynamic = route is not None and any(v != 0.0 for v in velocity)
    return SceneObject(obj_id, class_id, "cylinder", (radius, radius, height), pose, velocity, dynamic, route)


def _add_pedestrians(spec, rng, objects, routes):
    cfg = spec.config
    kinds = _PEDESTRIANS[spec.name]
    hw = spec.road_width / 2
    ped_class = spec.class_id("pedestrian")

    def add(a, b, direction, speed):
        length = math.dist(a, b)
        phase = float(rng.uniform(0, 2 * length)) if speed > 0 else float(rng.uniform(0, length))
        route = PedestrianRoute(tuple(map(float, a)), tuple(map(float, b)), direction, speed, phase)
        routes.append(route)
        v = route.velocity(0.0)
        pos = route.position(0.0)
        objects.append(
            _cylinder(len(objects) + 1, ped_class, pos, cfg.pedestrian_radius, cfg.pedestrian_height,
                      (float(v[0]), float(v[1]), 0.0), len(routes) - 1)
        )

    path = spec.path
    for i in range(len(path.waypoints) - 1):
        a = np.asarray(path.waypoints[i])
        b = np.asarray(path.waypoints[i + 1])
        length = float(np.linalg.norm(b - a))
        u = (b - a) / length
        n = np.array([-u[1], u[0]])
        if "perpendicular" in kinds:
            n_stations = max(1, int(length // 12))
            for k in range(n_stations):
                s = length * (k + 1) / (n_stations + 1) + rng.uniform(-2, 2)
                base = a + u * s
                reach = hw + 1.0
                speed = float(rng.uniform(spec.speed_mode.lo, spec.speed_mode.hi))
                add(base - n * reach, base + n * reach, "perpendicular", speed)
        if "parallel" in kinds and length > 10:
            lat = rng.uniform(-0.6, 0.6) * hw
            s0 = rng.uniform(0.25, 0.45) * length
            speed = float(rng.uniform(spec.speed_mode.lo, spec.speed_mode.hi))
            add(a + u * s0 + n * lat, a + u * min(length - 2, s0 + 12.0) + n * lat, "parallel", speed)
        if "static" in kinds and length > 10:
            lat = rng.choice([-1, 1]) * rng.uniform(0.4, 0.8) * hw
            s0 = rng.uniform(0.3, 0.7) * length
            p = a + u * s0 + n * lat
            add(p, p, "static", 0.0)


def _add_static(spec, rng, objects):
    cfg = spec.config
    margin = cfg.sidewalk_width + 0.5
    categories = spec.categories

    def footprint(centre, yaw_angle, size):
        c, s = math.cos(yaw_angle), math.sin(yaw_angle)
        pts = []
        for fx in (-0.5, 0.0, 0.5):
            for fy in (-0.5, 0.0, 0.5):
                lx, ly = fx * size[0], fy * size[1]
                pts.append((centre[0] + c * lx - s * ly, centre[1] + s * lx + c * ly))
        return np.array(pts)

    def free(centre, yaw_angle, size):
        if np.any(spec.near_road(footprint(centre, yaw_angle, size), margin)):
            return False
        for o in objects:
            if math.dist(centre, o.pose.translation[:2]) < 0.5 * (max(size[:2]) + max(o.size[:2])):
                return False
        return True

    for seg in spec.segments:
        a, b = np.asarray(seg.a), np.asarray(seg.b)
        length = float(np.linalg.norm(b - a))
        u = (b - a) / length
        n = np.array([-u[1], u[0]])
        heading = math.atan2(u[1], u[0])
        for side in (-1, 1):
            s = rng.uniform(0, 4)
            while s < length:
                depth = rng.uniform(5, 9)
                size = (rng.uniform(6, 10), depth, rng.uniform(6, 14))
                offset = spec.road_width / 2 + margin + depth / 2 + 0.1
                centre = a + u * (s + size[0] / 2) + n * side * offset
                if free(centre, heading, size):
                    objects.append(_box(len(objects) + 1, spec.class_id("building"), centre, heading, size))
                s += size[0] + rng.uniform(1, 4)

        hw = spec.road_width / 2
        sidewalk_mid = hw + cfg.sidewalk_width / 2
        if "tree" in categories:
            for s in np.arange(rng.uniform(3, 8), length, 9.0):
                side = rng.choice([-1, 1])
                centre = a + u * s + n * side * (hw + cfg.sidewalk_width + 0.8)
                if not np.any(spec.near_road(centre[None], cfg.sidewalk_width + 0.4)):
                    objects.append(_cylinder(len(objects) + 1, spec.class_id("tree"), centre, 0.3, 4.0))
        if "car" in categories:
            for s in np.arange(rng.uniform(4, 10), length - 4, 14.0):
                side = rng.choice([-1, 1])
                centre = a + u * s + n * side * sidewalk_mid
                if not np.any(spec.near_road(footprint(centre, heading, (4.2, 1.8)), 0.2)):
                    objects.append(_box(len(objects) + 1, spec.class_id("car"), centre, heading, (4.2, 1.8, 1.5)))
        if "fence" in categories:
            for side in (-1, 1):
                centre = a + u * (length / 2) + n * side * (hw + cfg.sidewalk_width + 0.2)
                size = (length * 0.6, 0.1, 1.0)
                if not np.any(spec.near_road(footprint(centre, heading, size), cfg.sidewalk_width)):
                    objects.append(_box(len(objects) + 1, spec.class_id("fence"), centre, heading, size))
        if "pole" in categories:
            for s in np.arange(rng.uniform(2, 6), length, 11.0):
                centre = a + u * s + n * rng.choice([-1, 1]) * (hw + 0.5)
                if not np.any(spec.on_road(centre[None])):
                    objects.append(_cylinder(len(objects) + 1, spec.class_id("pole"), centre, 0.12, 5.0))
    if "traffic_light" in categories:
        hw = spec.road_width / 2
        for corner in ((-hw - 1.0, -hw - 1.0), (hw + 1.0, -hw - 1.0)):
            objects.append(_cylinder(len(objects) + 1, spec.class_id("traffic_light"), corner, 0.15, 3.5))
