"""Experiment configuration.

Configs serialize to flat ``section.key = value`` text. Values are Python
literals; unknown sections or keys are rejected so a typo in an ablation
never silently falls back to a default.
"""

from __future__ import annotations

import ast
import copy
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class FusionConfig:
    patch_h: int = 2
    patch_w: int = 2
    c_u: int = 256
    n_p: int = 8
    n_h: int = 16
    n_u: int = 2
    n_n: int = 2
    n_q: int = 1

    @property
    def c_q(self) -> int:
        return self.c_u // (self.patch_h * self.patch_w)

    @property
    def fused_channels(self) -> int:
        return self.n_p * self.c_q

    def check(self, height: int, width: int) -> None:
        from .numerics import ConfigurationError

        if height % self.patch_h or width % self.patch_w:
            raise ConfigurationError(
                f"divisibility: grid {height}x{width} not divisible by patch {self.patch_h}x{self.patch_w}"
            )
        if self.c_u % (self.patch_h * self.patch_w):
            raise ConfigurationError(
                f"divisibility: c_u={self.c_u} not divisible by patch area {self.patch_h * self.patch_w}"
            )
        if self.c_u % self.n_h:
            raise ConfigurationError(f"divisibility: c_u={self.c_u} not divisible by n_h={self.n_h}")
        for k in ("n_p", "n_h", "n_u", "n_n", "n_q"):
            if getattr(self, k) < 1:
                raise ConfigurationError(f"{k} must be >= 1")


@dataclass
class HeadConfig:
    num_classes: int = 2
    trunk_channels: int = 64
    kernel: int = 3
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    alpha: float = 0.25
    gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    prior_prob: float = 0.01
    score_thresh: float = 0.1
    nms_iou: float = 0.2
    pre_nms_top_k: int = 100


@dataclass
class SceneConfig:
    x_min: float = 0.0
    x_max: float = 25.6
    y_min: float = -12.8
    y_max: float = 12.8
    grid_h: int = 16
    grid_w: int = 16
    min_objects: int = 1
    max_objects: int = 5
    noise: bool = True
    # weather name -> relative frequency
    weather_mix: dict = field(
        default_factory=lambda: {
            "Normal": 2.0,
            "Overcast": 1.0,
            "Fog": 1.0,
            "Rain": 1.0,
            "Sleet": 1.0,
            "LightSnow": 1.0,
            "HeavySnow": 1.0,
        }
    )
    # failure string (see scenes.parse_failure) -> relative frequency
    failure_mix: dict = field(default_factory=lambda: {"none": 1.0})
    distance_bin: float = 3.2

    @property
    def cell_x(self) -> float:
        return (self.x_max - self.x_min) / self.grid_h

    @property
    def cell_y(self) -> float:
        return (self.y_max - self.y_min) / self.grid_w


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch: int = 2
    epochs: int = 11
    max_steps: int = 0  # 0 = run all epochs
    weight_decay: float = 0.01
    scl: bool = True
    combos: tuple = ("C", "L", "R", "LR", "CR", "CL", "CLR")
    checkpoint_every: int = 0
    train_frames: int = 500
    eval_frames: int = 200
    log_every: int = 1


@dataclass
class ExperimentConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    scenes: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    precision: int = 32

    # ---------------------------------------------------------------- text io

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                for sub in fields(val):
                    lines.append(f"{f.name}.{sub.name} = {_literal(getattr(val, sub.name))}")
            else:
                lines.append(f"{f.name} = {_literal(val)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        cfg = copy.deepcopy(base) if base is not None else cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip() if not raw.strip().startswith("#") else ""
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), base)

    def set(self, key: str, value: Any) -> None:
        """Assign ``key`` ("section.name" or top-level name); strings are parsed as literals."""
        parts = key.split(".")
        target: Any = self
        for p in parts[:-1]:
            if p not in {f.name for f in fields(target)} or not dataclasses.is_dataclass(getattr(target, p)):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            target = getattr(target, p)
        name = parts[-1]
        known = {f.name: f for f in fields(target)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{key!r} is a section, not a value")
        setattr(target, name, _coerce(key, value, current))

    def validate(self) -> None:
        from .numerics import ConfigurationError

        try:
            self.fusion.check(self.scenes.grid_h, self.scenes.grid_w)
        except ConfigurationError as e:
            raise ConfigError(str(e)) from e
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if not 0 <= self.head.neg_iou <= self.head.pos_iou <= 1:
            raise ConfigError("need 0 <= neg_iou <= pos_iou <= 1")
        if self.scenes.min_objects > self.scenes.max_objects:
            raise ConfigError("min_objects > max_objects")
        for combo in self.train.combos:
            if not combo or set(combo) - set("CLR"):
                raise ConfigError(f"bad sensor combination {combo!r}")

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _literal(v: Any) -> str:
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k!r}: {v[k]!r}" for k in sorted(v)) + "}"
    return repr(v)


def _coerce(key: str, value: Any, current: Any) -> Any:
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = ast.literal_eval(value)
        except (ValueError, SyntaxError) as e:
            raise ConfigError(f"{key}: cannot parse {value!r}") from e
    elif isinstance(value, str) and isinstance(current, str):
        try:
            parsed = ast.literal_eval(value)
            if isinstance(parsed, str):
                value = parsed
        except (ValueError, SyntaxError):
            pass
    want = type(current)
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}")
    elif want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {value!r}")
    elif want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {value!r}")
        value = float(value)
    elif want is tuple:
        if isinstance(value, str):
            value = (value,)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a tuple, got {value!r}")
        value = tuple(value)
    elif want is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a dict, got {value!r}")
    elif not isinstance(value, want):
        raise ConfigError(f"{key}: expected {want.__name__}, got {value!r}")
    return value


def desk_preset() -> ExperimentConfig:
    """16x16 grid, C_u=64, n_p=2, n_h=4: sized to train on a laptop CPU."""
    cfg = ExperimentConfig()
    cfg.fusion = FusionConfig(patch_h=2, patch_w=2, c_u=64, n_p=2, n_h=4, n_u=2, n_n=2, n_q=1)
    cfg.train.epochs = 4
    return cfg


def full_preset() -> ExperimentConfig:
    """Full-scale fusion block on the long K-Radar-style corridor."""
    cfg = ExperimentConfig()
    cfg.scenes = SceneConfig(
        x_min=0.0, x_max=72.0, y_min=-6.4, y_max=6.4, grid_h=180, grid_w=32, distance_bin=8.0
    )
    return cfg


PRESETS = {"desk": desk_preset, "full": full_preset}
