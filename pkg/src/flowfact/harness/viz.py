"""Colour-wheel rendering of flow fields.

Direction sets the hue (``atan2(v, u)``), magnitude relative to ``flow_scale``
sets the saturation, and value stays at full brightness, so zero flow is
white.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import FlowField


def flow_to_hsv(flow: FlowField | np.ndarray, flow_scale: float | None = None) -> np.ndarray:
    """HxWx3 float array of (hue degrees in [0, 360), saturation, value)."""
    data = flow.data if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    u, v = data[..., 0], data[..., 1]
    mag = np.hypot(u, v)
    if flow_scale is None:
        flow_scale = float(mag.max()) if mag.size and mag.max() > 0 else 1.0
    if not flow_scale > 0:
        raise ValueError(f"flow_scale must be positive, got {flow_scale}")
    hue = np.mod(np.degrees(np.arctan2(v, u)), 360.0)
    sat = np.clip(mag / flow_scale, 0.0, 1.0)
    hue = np.where(mag > 0, hue, 0.0)
    return np.stack([hue, sat, np.ones_like(sat)], axis=-1)


def render_flow_image(flow: FlowField | np.ndarray, flow_scale: float | None = None) -> np.ndarray:
    """HxWx3 uint8 RGB image of ``flow``; ``flow_scale`` defaults to the maximum magnitude."""
    hsv = flow_to_hsv(flow, flow_scale)
    h8 = np.round(hsv[..., 0] * (256.0 / 360.0)).astype(np.int64) % 256
    s8 = np.round(hsv[..., 1] * 255.0)
    v8 = np.round(hsv[..., 2] * 255.0)
    arr = np.stack([h8, s8, v8], axis=-1).astype(np.uint8)
    return np.asarray(Image.fromarray(arr, mode="HSV").convert("RGB"))


def save_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image)).save(path)


def save_flow_png(path: str | Path, flow: FlowField | np.ndarray, flow_scale: float | None = None) -> None:
    save_png(path, render_flow_image(flow, flow_scale))
