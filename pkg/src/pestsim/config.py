"""Flat ``section.field = value`` run configuration."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field, fields, replace

from .circuit import CircuitParams
from .cmmformer import ModelConfig, TrainConfig
from .curation import CurationConfig
from .device import DeviceConfig
from .dropsim import CampaignConfig, make_devices
from .firmware import TriggerConfig
from .optics import BeamGeometry, Layout

SEED_ENV = "PESTSIM_SEED"


class ConfigError(ValueError):
    def __init__(self, key: str, detail: str):
        super().__init__(f"{key}: {detail}")
        self.key = key


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class DeviceSection:
    n_devices: int = 3
    buffer_len: int = 256
    noise_sd: float = 2.0
    wander_amplitude: float = 8.0
    wander_period: float = 20.0
    gain_sigma: float = 0.15
    offset_sd: float = 60.0


@dataclass(frozen=True)
class CampaignSection:
    n_events: int = 200
    species_mix: dict = field(default_factory=lambda: dict(CampaignConfig().species_mix))
    scenario_mix: dict = field(default_factory=lambda: dict(CampaignConfig().scenario_mix))
    event_spacing: float = 5.0
    reference_drops: int = 100


@dataclass(frozen=True)
class CurationSection:
    low_sum_threshold: float = CurationConfig.low_sum_threshold
    valley_depth: float = CurationConfig.valley_depth
    min_peak_gap: int = CurationConfig.min_peak_gap
    smooth_window: int = CurationConfig.smooth_window
    min_peak_height: float = CurationConfig.min_peak_height
    split_ratio: tuple = (0.6, 0.2, 0.2)
    paper_order: bool = False


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 60
    patience: int = 10
    float32: bool = True


@dataclass(frozen=True)
class CountingSection:
    hidden: int = 64
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3


@dataclass(frozen=True)
class BenchSection:
    drops: int = 10
    devices: int = 3
    max_response_time: float = 1e-3
    linearity_margin: float = 0.3


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    geometry: BeamGeometry = field(default_factory=BeamGeometry)
    circuit: CircuitParams = field(default_factory=CircuitParams)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    device: DeviceSection = field(default_factory=DeviceSection)
    campaign: CampaignSection = field(default_factory=CampaignSection)
    curation: CurationSection = field(default_factory=CurationSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    counting: CountingSection = field(default_factory=CountingSection)
    bench: BenchSection = field(default_factory=BenchSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def device_template(self) -> DeviceConfig:
        d = self.device
        return DeviceConfig(
            geometry=self.geometry, circuit=self.circuit, trigger=self.trigger,
            buffer_len=d.buffer_len, noise_sd=d.noise_sd, wander_amplitude=d.wander_amplitude,
            wander_period=d.wander_period, gain_sigma=d.gain_sigma, offset_sd=d.offset_sd,
        )

    def devices(self) -> list[DeviceConfig]:
        return make_devices(self.device.n_devices, self.seed, self.device_template())

    def campaign_config(self) -> CampaignConfig:
        c = self.campaign
        return CampaignConfig(
            n_events=c.n_events, species_mix=dict(c.species_mix), scenario_mix=dict(c.scenario_mix),
            n_devices=self.device.n_devices, seed=self.seed, event_spacing=c.event_spacing,
            reference_drops=c.reference_drops,
        )

    def curation_config(self) -> CurationConfig:
        c = self.curation
        return CurationConfig(
            low_sum_threshold=c.low_sum_threshold, valley_depth=c.valley_depth, min_peak_gap=c.min_peak_gap,
            smooth_window=c.smooth_window, min_peak_height=c.min_peak_height,
            sample_period=self.trigger.sample_period, buffer_len=self.device.buffer_len,
            split_ratio=tuple(c.split_ratio), seed=self.seed, paper_order=c.paper_order,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, batch_size=t.batch_size, max_epochs=t.max_epochs, patience=t.patience,
                           seed=self.seed, float32=t.float32)


# --- text format -------------------------------------------------------------


def _base_type(annotation: str) -> tuple[str, bool]:
    if isinstance(annotation, type):
        annotation = annotation.__name__
    parts = [p.strip() for p in str(annotation).split("|")]
    optional = "None" in parts
    parts = [p for p in parts if p != "None"]
    return parts[0].split("[")[0], optional


def _parse_mix(text: str) -> dict:
    out = {}
    for item in text.split(","):
        if not item.strip():
            continue
        name, sep, weight = item.partition(":")
        if not sep:
            raise ValueError(f"expected name:weight, got {item.strip()!r}")
        out[name.strip()] = float(weight)
    return out


def _coerce(text: str, annotation: str):
    kind, optional = _base_type(annotation)
    if optional and text.lower() == "none":
        return None
    if kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "str":
        return text
    if kind == "tuple":
        vals = [v.strip() for v in text.split(",") if v.strip()]
        return tuple(int(v) if v.lstrip("-").isdigit() else float(v) for v in vals)
    if kind == "dict":
        return _parse_mix(text)
    if kind == "Layout":
        return Layout(text)
    raise ValueError(f"unsupported field type {annotation}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, dict):
        return ", ".join(f"{k}:{_format(float(v))}" for k, v in value.items())
    return str(value)


def parse_config(text: str, *, env: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig`; unknown keys and bad values raise ConfigError."""
    values: dict[str, dict] = {}
    sections = {f.name: f for f in fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ConfigError(key or f"line {lineno}", "expected 'key = value'")
        section, dot, name = key.partition(".")
        if not dot or section not in sections:
            raise ConfigError(key, "unknown key")
        cls = sections[section].default_factory
        ann = {f.name: f.type for f in fields(cls)}
        if name not in ann:
            raise ConfigError(key, "unknown key")
        try:
            values.setdefault(section, {})[name] = _coerce(val, ann[name])
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from None
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            values.setdefault("run", {})["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(SEED_ENV, f"not an integer: {env[SEED_ENV]!r}") from None
    built = {}
    for section, f in sections.items():
        try:
            built[section] = f.default_factory(**values.get(section, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(section, str(exc)) from None
    cfg = RunConfig(**built)
    try:
        cfg.campaign_config()
    except ValueError as exc:
        raise ConfigError("campaign", str(exc)) from None
    return cfg


def load_config(path, *, env: dict | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config ({exc.strerror})") from None
    return parse_config(text, env=env)


def dump_config(cfg: RunConfig) -> str:
    """Every key with its resolved value; parses back to an equal config."""
    lines = ["# resolved run configuration"]
    for sec in fields(RunConfig):
        obj = getattr(cfg, sec.name)
        lines.append("")
        for f in fields(obj):
            lines.append(f"{sec.name}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, out_dir) -> str:
    path = os.path.join(out_dir, "resolved_config.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    return path


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """Replace fields per section, e.g. ``with_overrides(cfg, run={"seed": 3})``."""
    return replace(cfg, **{k: replace(getattr(cfg, k), **v) for k, v in sections.items()})


__all__ = [
    "ConfigError", "RunConfig", "parse_config", "load_config", "dump_config", "write_resolved",
    "with_overrides", "SEED_ENV",
]
