"""Agent kinematics, rewards and episode termination."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from ..geometry import RigidTransform
from .layout import EnvironmentSpec
from .render import RenderFrame, camera_pose, raycast_render

REWARD_SUCCESS = 5.0
REWARD_FAILURE = -5.0
REWARD_SURVIVAL = 0.01

SUCCESS, COLLISION, OOB, TIMEOUT = "success", "collision", "oob", "timeout"
OUTCOMES = (SUCCESS, COLLISION, OOB, TIMEOUT)


class Action(IntEnum):
    NO_OP = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentState:
    position: tuple[float, float]
    heading: float
    angular_velocity: float = 0.0
    forward_speed: float = 10.0


@dataclass(frozen=True)
class EpisodeResult:
    outcome: str
    steps: int
    ret: float


@dataclass(frozen=True)
class WorldState:
    spec: EnvironmentSpec
    agent: AgentState
    steps: int = 0
    ret: float = 0.0
    done: bool = False
    outcome: str | None = None

    @property
    def time(self) -> float:
        return self.steps * self.spec.dt

    def camera(self) -> RigidTransform:
        cfg = self.spec.config
        return camera_pose(self.agent.position, self.agent.heading, cfg.camera_height, cfg.camera_pitch_deg)


def reset(spec: EnvironmentSpec) -> WorldState:
    path = spec.path
    agent = AgentState(tuple(map(float, path.waypoints[0])), path.start_heading, 0.0, spec.config.forward_speed)
    return WorldState(spec, agent)


def render(state: WorldState) -> RenderFrame:
    return raycast_render(state.spec, state.camera(), state.time)


def _disc_samples(position, radius: float, n: int = 16) -> np.ndarray:
    ang = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    ring = np.stack([position[0] + radius * np.cos(ang), position[1] + radius * np.sin(ang)], axis=1)
    return np.vstack([np.asarray(position, dtype=np.float64)[None], ring])


def _box_distance(point, obj, pose) -> float:
    d = np.asarray(point) - pose.translation[:2]
    yaw = math.atan2(pose.rotation[1, 0], pose.rotation[0, 0])
    c, s = math.cos(yaw), math.sin(yaw)
    lx, ly = c * d[0] + s * d[1], -s * d[0] + c * d[1]
    ex = max(abs(lx) - obj.size[0] / 2, 0.0)
    ey = max(abs(ly) - obj.size[1] / 2, 0.0)
    return math.hypot(ex, ey)


def classify_failure(state: WorldState) -> str | None:
    """``collision`` on pedestrian contact, ``oob`` on leaving the road or touching
    any other obstacle, otherwise ``None``."""
    spec = state.spec
    cfg = spec.config
    pos = np.asarray(state.agent.position, dtype=np.float64)
    r = cfg.agent_radius
    ped = spec.class_id("pedestrian")
    poses = spec.object_poses(state.time)
    for obj in spec.objects:
        if obj.class_id == ped:
            centre = poses[obj.id].translation[:2]
            if math.dist(pos, centre) < r + obj.size[0]:
                return COLLISION
    if not np.all(spec.on_road(_disc_samples(pos, r))):
        return OOB
    for obj in spec.objects:
        if obj.class_id == ped:
            continue
        pose = poses[obj.id]
        if obj.shape == "cylinder":
            if math.dist(pos, pose.translation[:2]) < r + obj.size[0]:
                return OOB
        elif _box_distance(pos, obj, pose) < r:
            return OOB
    return None


def integrate(agent: AgentState, action: int, spec: EnvironmentSpec) -> AgentState:
    cfg = spec.config
    dt = spec.dt
    omega = agent.angular_velocity
    alpha = math.radians(spec.turn_accel_deg)
    if action == Action.TURN_LEFT:
        omega += alpha * dt
    elif action == Action.TURN_RIGHT:
        omega -= alpha * dt
    elif action == Action.NO_OP:
        omega *= cfg.angular_decay
    else:
        raise ValueError(f"invalid action {action!r}")
    limit = math.radians(cfg.max_angular_velocity_deg)
    omega = min(max(omega, -limit), limit)
    heading = agent.heading + omega * dt
    step = agent.forward_speed * dt
    x = agent.position[0] + step * math.cos(heading)
    y = agent.position[1] + step * math.sin(heading)
    return AgentState((x, y), heading, omega, agent.forward_speed)


def step(state: WorldState, action: int) -> tuple[WorldState, float, bool, EpisodeResult | None]:
    """Advance one frame. Returns (state, reward, done, result-if-done)."""
    if state.done:
        raise EpisodeDoneError("step() called on a finished episode")
    spec = state.spec
    agent = integrate(state.agent, int(action), spec)
    nxt = replace(state, agent=agent, steps=state.steps + 1)
    failure = classify_failure(nxt)
    if failure is not None:
        outcome, reward = failure, REWARD_FAILURE
    elif spec.in_end_zone(np.asarray(agent.position)[None], spec.config.agent_radius)[0]:
        outcome, reward = SUCCESS, REWARD_SUCCESS
    elif nxt.steps >= spec.time_limit:
        outcome, reward = TIMEOUT, REWARD_FAILURE
    else:
        outcome, reward = None, REWARD_SURVIVAL
    done = outcome is not None
    nxt = replace(nxt, ret=state.ret + reward, done=done, outcome=outcome)
    result = EpisodeResult(outcome, nxt.steps, nxt.ret) if done else None
    return nxt, reward, done, result
