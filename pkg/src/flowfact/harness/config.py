"""Experiment configuration loaded from INI files.

Sections map onto dataclasses: ``[experiment]`` onto ``ExperimentConfig``,
``[scene]`` onto ``SceneConfig``, ``[midlevel]`` onto ``MidlevelConfig`` and
``[training]`` onto ``TrainConfig``. Unknown sections or keys are errors.
List values are comma separated.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..midlevel import MidlevelConfig, RepresentationSpecError, parse_spec, spec_string
from ..sac import TrainConfig
from ..scene.layout import ENVIRONMENTS, SPEED_MODES, SceneConfig

COMPOSITION_SWEEP = ("ego", "obj", "raw", "ego+obj")
COMPLEMENTARITY_SWEEP = ("seg2", "depth2", "ego+obj", "ego+obj+seg2", "ego+obj+depth2", "ego+obj+seg2+depth2")
FPS_SWEEP = (6, 8, 10, 12)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    environment: str = "StraightRoad"
    representations: str = "ego+obj"
    train_speed: str = "normal"
    eval_speeds: tuple[str, ...] = ("low", "high")
    train_fps: float = 12.0
    eval_fps: tuple[float, ...] = FPS_SWEEP
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_episodes: int = 100
    eval_seed: int = 1000
    compositions: tuple[str, ...] = COMPOSITION_SWEEP
    complementarity: tuple[str, ...] = COMPLEMENTARITY_SWEEP
    output_dir: str = "runs"
    scene: SceneConfig = field(default_factory=SceneConfig)
    midlevel: MidlevelConfig = field(default_factory=MidlevelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.environment not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.environment!r}; expected one of {ENVIRONMENTS}")
        for s in (self.train_speed, *self.eval_speeds):
            if s not in SPEED_MODES:
                raise ConfigError(f"unknown speed mode {s!r}; expected one of {tuple(SPEED_MODES)}")
        for f in (self.train_fps, *self.eval_fps):
            if not 1 <= f <= 60:
                raise ConfigError(f"fps must be in [1, 60], got {f}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        for spec in (self.representations, *self.compositions, *self.complementarity):
            try:
                parse_spec(spec)
            except RepresentationSpecError as exc:
                raise ConfigError(f"bad representation {exc.token!r}: {exc}") from exc
        self.representations = spec_string(parse_spec(self.representations))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Stable hash of everything that affects results (output_dir excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {"experiment": ExperimentConfig, "scene": SceneConfig, "midlevel": MidlevelConfig, "training": TrainConfig}
_NESTED = {"scene", "midlevel", "training"}


def _convert(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.strip().lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(text, inner[0], key)
    if origin is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(_convert(t, args[0], key) for t in items)
    if hint is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if hint in (int, float, str):
        try:
            return hint(text.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected {hint.__name__}, got {text!r}") from None
    raise ConfigError(f"{key}: unsupported option type {hint!r}")


def _apply(obj, section: str, items: dict[str, str]):
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in fields(obj)} - _NESTED
    updates = {}
    for key, text in items.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown option {key!r}")
        updates[key] = _convert(text, hints[key], f"[{section}] {key}")
    try:
        return replace(obj, **updates)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def load_config(path: str | Path | None = None, overrides: dict[str, dict[str, str]] | None = None) -> ExperimentConfig:
    """Read an INI file (or start from defaults) and apply ``{section: {key: text}}`` overrides."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    sections = {s: dict(parser[s]) for s in parser.sections()}
    for s, kv in (overrides or {}).items():
        sections.setdefault(s, {}).update(kv)
    unknown = set(sections) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    parts = {}
    for name in _NESTED:
        parts[name] = _apply(_SECTIONS[name](), name, sections.get(name, {}))
    base = ExperimentConfig(**parts)
    return _apply(base, "experiment", sections.get("experiment", {}))


def dump_config(config: ExperimentConfig) -> str:
    """INI text that ``load_config`` reads back to an equal config."""

    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, tuple):
            return ", ".join(fmt(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return str(v)

    parser = configparser.ConfigParser(interpolation=None)
    top = {f.name: getattr(config, f.name) for f in fields(config) if f.name not in _NESTED}
    parser["experiment"] = {k: fmt(v) for k, v in top.items()}
    for name in ("scene", "midlevel", "training"):
        obj = getattr(config, name)
        parser[name] = {f.name: fmt(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
