"""Environments exposing the observation/step interface the trainer expects.

``reset(seed)`` returns a dict of named HWC planes; ``step(action)`` returns
``(planes, reward, done, info)`` where ``info`` may carry an ``outcome``.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import scene
from .geometry import RigidTransform
from .midlevel import CameraRig, MidlevelConfig, channels, compose, parse_spec, spec_string
from .scene.layout import CATEGORIES, SceneConfig


class NavigationEnv:
    n_actions = 3

    def __init__(
        self,
        name: str,
        representations,
        speed: str = "normal",
        fps: float = 12.0,
        scene_config: SceneConfig | None = None,
        midlevel_config: MidlevelConfig | None = None,
    ):
        if name not in scene.ENVIRONMENTS:
            raise ValueError(f"unknown environment {name!r}")
        self.name = name
        self.representations = parse_spec(representations)
        self.speed = scene.speed_mode(speed)
        self.fps = float(fps)
        self.scene_config = scene_config or SceneConfig()
        base = midlevel_config or MidlevelConfig()
        self.midlevel_config = replace(base, num_classes=len(CATEGORIES[name]))
        self.intrinsics = self.scene_config.intrinsics()
        self.state: scene.WorldState | None = None
        self._frame = None

    @property
    def spec_string(self) -> str:
        return spec_string(self.representations)

    @property
    def observation_shapes(self) -> dict[str, tuple[int, int, int]]:
        k = self.intrinsics
        return {r.value: (k.height, k.width, channels(r, self.midlevel_config)) for r in self.representations}

    def _observe(self, prev, curr, step_index):
        motion = scene.camera_motion(prev.camera, curr.camera) if prev is not None else RigidTransform.identity()
        rig = CameraRig(self.intrinsics, motion, 1.0 / self.fps)
        self.last_observation = compose(self.representations, (prev, curr), rig, self.midlevel_config, step_index)
        return self.last_observation.as_dict()

    def reset(self, seed: int = 0) -> dict[str, np.ndarray]:
        spec = scene.build_environment(self.name, self.speed, self.fps, seed, self.scene_config)
        self.state = scene.reset(spec)
        self._frame = scene.render(self.state)
        return self._observe(None, self._frame, 0)

    def step(self, action: int):
        self.state, reward, done, result = scene.step(self.state, action)
        frame = scene.render(self.state)
        obs = self._observe(self._frame, frame, self.state.steps)
        self._frame = frame
        info = {"outcome": result.outcome, "steps": result.steps, "return": result.ret} if done else {}
        return obs, reward, done, info


class BanditEnv:
    """One-step episodes with a fixed reward per arm."""

    n_actions = 3

    def __init__(self, rewards=(1.0, 0.0, 0.0)):
        self.rewards = tuple(float(r) for r in rewards)
        self.observation_shapes = {"x": (1, 1, 1)}
        self.spec_string = "x"

    def _obs(self):
        return {"x": np.ones((1, 1, 1), dtype=np.float32)}

    def reset(self, seed: int = 0):
        return self._obs()

    def step(self, action: int):
        r = self.rewards[int(action)]
        outcome = "success" if r == max(self.rewards) else "timeout"
        return self._obs(), r, True, {"outcome": outcome, "steps": 1, "return": r}


class ChainEnv:
    """Deterministic chain; action 0 moves right, 1 left, 2 stays.

    Each step costs ``step_reward``; entering the last state pays
    ``goal_reward`` and ends the episode.
    """

    n_actions = 3

    def __init__(self, n_states: int = 5, goal_reward: float = 5.0, step_reward: float = -1.0, time_limit: int = 20):
        self.n_states = n_states
        self.goal_reward = goal_reward
        self.step_reward = step_reward
        self.time_limit = time_limit
        self.observation_shapes = {"x": (1, n_states, 1)}
        self.spec_string = "x"
        self.pos = 0
        self.t = 0
        self.ret = 0.0

    def _obs(self):
        x = np.zeros((1, self.n_states, 1), dtype=np.float32)
        x[0, self.pos, 0] = 1.0
        return {"x": x}

    def transition(self, pos: int, action: int) -> tuple[int, float, bool]:
        move = {0: 1, 1: -1, 2: 0}[int(action)]
        nxt = min(max(pos + move, 0), self.n_states - 1)
        if nxt == self.n_states - 1:
            return nxt, self.goal_reward, True
        return nxt, self.step_reward, False

    def reset(self, seed: int = 0):
        self.pos, self.t, self.ret = 0, 0, 0.0
        return self._obs()

    def step(self, action: int):
        self.pos, r, done = self.transition(self.pos, action)
        self.t += 1
        self.ret += r
        info = {}
        if done or self.t >= self.time_limit:
            info = {"outcome": "success" if done else "timeout", "steps": self.t, "return": self.ret}
            done = True
        return self._obs(), r, done, info
