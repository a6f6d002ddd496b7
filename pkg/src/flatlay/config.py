"""Run configuration: one structured file covering every stage of the pipeline.

Keys (YAML or JSON)::

    codec:    {downsample_factor, latent_channels, mode, seed}
    unet:     {in_channels, out_channels, base_channels, channel_multipliers, ...}
    schedule: {T, beta_start, beta_end}
    train:    {learning_rate, batch_size, epochs, selector, seed, loss_region, ...}
    sample:   {steps, eta}
    paths:    {dataset_dir, checkpoint, init_checkpoint, report_dir}

Missing sections and keys take the desk defaults below. Command-line
overrides use dotted paths, e.g. ``--train.learning_rate=1e-3``.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .codec import CodecConfig
from .diffusion import NoiseSchedule, make_linear_schedule
from .errors import ConfigError
from .trainer import TrainConfig
from .unet import UNetConfig


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class SampleConfig:
    steps: int = 50
    eta: float = 0.0


@dataclass
class PathsConfig:
    dataset_dir: str | None = None
    checkpoint: str = "run/model.ckpt"
    init_checkpoint: str | None = None
    report_dir: str = "run"


def desk_codec() -> CodecConfig:
    return CodecConfig(downsample_factor=4, latent_channels=4, mode="dct_lowpass")


def desk_unet() -> UNetConfig:
    return UNetConfig(in_channels=9, out_channels=4, parameterization="v")


def desk_train() -> TrainConfig:
    return TrainConfig(learning_rate=5e-4, batch_size=8, epochs=30, selector="full")


@dataclass
class RunConfig:
    codec: CodecConfig = field(default_factory=desk_codec)
    unet: UNetConfig = field(default_factory=desk_unet)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=desk_train)
    sample: SampleConfig = field(default_factory=SampleConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        """Per-section checks, then cross-field consistency; errors name the offending key path."""
        self.codec.validate()
        self.unet.validate()
        self.train.validate()
        self.schedule.build()
        c = self.codec.latent_channels
        if self.unet.in_channels != 2 * c + 1:
            raise ConfigError(
                f"unet.in_channels: expected 2*codec.latent_channels+1 = {2 * c + 1}, got {self.unet.in_channels}"
            )
        if self.unet.out_channels != c:
            raise ConfigError(f"unet.out_channels: expected codec.latent_channels = {c}, got {self.unet.out_channels}")
        if self.sample.steps < 1 or self.sample.steps > self.schedule.T:
            raise ConfigError(f"sample.steps must be in [1, schedule.T={self.schedule.T}], got {self.sample.steps}")
        if self.sample.eta < 0:
            raise ConfigError(f"sample.eta must be >= 0, got {self.sample.eta}")

    def to_dict(self) -> dict:
        return {
            "codec": self.codec.to_dict(),
            "unet": self.unet.to_dict(),
            "schedule": asdict(self.schedule),
            "train": self.train.to_dict(),
            "sample": asdict(self.sample),
            "paths": asdict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a mapping of sections")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        base = cls()
        kwargs = {}
        for f in fields(cls):
            kwargs[f.name] = _merge(getattr(base, f.name), d.get(f.name) or {}, f.name)
        return cls(**kwargs)


def _coerce(default, value, path):
    # YAML 1.1 reads "5e-4" as a string; numeric fields accept such strings.
    if isinstance(value, str) and isinstance(default, (int, float)) and not isinstance(default, bool):
        try:
            return type(default)(value) if isinstance(default, float) else int(value)
        except ValueError:
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _merge(section, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(values).__name__}")
    names = {f.name for f in fields(section)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(f'{name}.{k}' for k in sorted(unknown))}")
    out = copy.deepcopy(section)
    for k, v in values.items():
        default = getattr(section, k)
        v = _coerce(default, v, f"{name}.{k}")
        object.__setattr__(out, k, v)  # CodecConfig is frozen
    return out


def parse_value(text: str):
    """Parse an override value as YAML (numbers, booleans, lists, null)."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` strings (leading dashes allowed) to a nested dict."""
    d = copy.deepcopy(d)
    for item in overrides:
        body = item.lstrip("-")
        if "=" not in body:
            raise ConfigError(f"override {item!r} must look like --section.key=value")
        key, text = body.split("=", 1)
        parts = key.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override {item!r}: expected section.key, got {key!r}")
        d.setdefault(parts[0], {})
        if not isinstance(d[parts[0]], dict):
            raise ConfigError(f"{parts[0]}: expected a mapping")
        d[parts[0]][parts[1]] = parse_value(text)
    return d


def load_config(path=None, overrides: list[str] = ()) -> RunConfig:
    """Read ``path`` (YAML or JSON; ``None`` means desk defaults), apply overrides, validate."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from exc
    cfg = RunConfig.from_dict(apply_overrides(raw, list(overrides)))
    cfg.validate()
    return cfg


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
