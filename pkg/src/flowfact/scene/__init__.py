"""Raycast navigation simulator with four urban layouts."""

from .layout import (
    BACKGROUND,
    CATEGORIES,
    ENVIRONMENTS,
    GROUND_ID,
    PATH_COUNTS,
    SPEED_MODES,
    TIME_LIMITS,
    EnvironmentSpec,
    NavPath,
    PedestrianRoute,
    SceneConfig,
    SceneObject,
    SpeedMode,
    build_environment,
    speed_mode,
)
from .render import RenderFrame, camera_motion, camera_pose, ground_truth_raw_flow, raycast_render
from .world import (
    COLLISION,
    OOB,
    OUTCOMES,
    REWARD_FAILURE,
    REWARD_SUCCESS,
    REWARD_SURVIVAL,
    SUCCESS,
    TIMEOUT,
    Action,
    AgentState,
    EpisodeDoneError,
    EpisodeResult,
    WorldState,
    classify_failure,
    integrate,
    render,
    reset,
    step,
)
