"""Run configuration: dataclass defaults plus a flat ``key = value`` file format.

Angles are degrees in the file and converted to radians exactly once at load;
everything downstream works in radians. The seed is mandatory so no run ever
depends on wall-clock state.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .augment import ChannelPolicy, StrongRanges, strong_default_policy, weak_default_policy
from .data import SynthConfig
from .detector import DetectorConfig
from .voxels import VoxelConfig


class ConfigError(ValueError):
    """Bad key, bad value, or missing mandatory setting."""


@dataclass
class RunConfig:
    seed: int = -1  # mandatory; -1 means "not set"
    dataset_root: str = "dataset"
    out_dir: str = "run"
    threads: int = 1
    # dataset
    n_scenes: int = 200
    n_val_scenes: int = 50
    fraction: float = 0.05
    synth: SynthConfig = field(default_factory=SynthConfig)
    # channel policies (angles in degrees here)
    n_channels: int = 3
    weak_rot_deg: float = 22.5
    weak_scale_low: float = 0.98
    weak_scale_high: float = 1.02
    strong_rot_deg: float = 45.0
    strong_scale_low: float = 0.95
    strong_scale_high: float = 1.05
    strong_flip_prob: float = 0.5
    # detector
    det: DetectorConfig = field(default_factory=DetectorConfig)
    # training
    pretrain_epochs: int = 25
    epochs: int = 10
    threshold_period: int = 5
    ema_momentum: float = 0.999
    prefilter_min_score: float = 0.1
    shuffle_grid_cells: int = 4
    unsup_background_weight: float = 0.3

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed is mandatory (set it in the config file or pass --seed)")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.n_scenes < 1 or self.n_val_scenes < 0:
            raise ConfigError("scene counts must be positive")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.threshold_period < 1:
            raise ConfigError("threshold_period must be >= 1")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must be in [0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def weak_policy(self, n_channels: int | None = None) -> ChannelPolicy:
        return weak_default_policy(
            n_channels=self.n_channels if n_channels is None else n_channels,
            rot=math.radians(self.weak_rot_deg),
            scale_low=self.weak_scale_low,
            scale_high=self.weak_scale_high,
        )

    def strong_policy(self) -> ChannelPolicy:
        rot = math.radians(self.strong_rot_deg)
        return strong_default_policy(
            n_channels=self.n_channels,
            ranges=StrongRanges(
                rot_min=-rot,
                rot_max=rot,
                scale_min=self.strong_scale_low,
                scale_max=self.strong_scale_high,
                flip_prob=self.strong_flip_prob,
            ),
        )


def _flatten(obj, prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(value) and not isinstance(value, type):
            out.update(_flatten(value, prefix=f"{key}."))
        else:
            out[key] = value
    return out


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, template):
    if isinstance(template, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        return tuple(float(v) for v in raw.split(","))
    return raw


def _rebuild(cls, flat: dict[str, object], prefix: str = ""):
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}{f.name}"
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if is_dataclass(default) and not isinstance(default, type):
            kwargs[f.name] = _rebuild(type(default), flat, prefix=f"{key}.")
        elif key in flat:
            kwargs[f.name] = flat[key]
        else:
            kwargs[f.name] = default
    return cls(**kwargs)


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"{k} = {_format_value(v)}" for k, v in _flatten(cfg).items()]
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Defaults, then file values, then explicit overrides (e.g. CLI flags)."""
    defaults = _flatten(RunConfig())
    flat: dict[str, object] = dict(defaults)
    if path is not None:
        text = Path(path).read_text()
        for key, raw in parse_config_text(text).items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                flat[key] = _coerce(raw, defaults[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
    for key, value in (overrides or {}).items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        flat[key] = value
    cfg = _rebuild(RunConfig, flat)
    cfg.validate()
    return cfg
