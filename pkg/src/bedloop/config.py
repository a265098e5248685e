"""Engine configuration: TOML (or JSON) sections mapped onto typed blocks,
validated against per-model allowed keys, with dotted-path overrides.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - py310 fallback
    import tomli as tomllib

from .models import MODEL_NAMES, make_model
from .models.base import Model
from .orchestrate import RefinementSchedule, TrainConfig
from .policy import PolicyArch, default_arch


class ConfigError(ValueError):
    """Invalid configuration file, key, or value."""


ALLOWED_MODEL_KEYS = {
    "location": {"n_sources", "dim", "alpha", "max_signal", "base_signal", "noise_sd"},
    "discounting": {"logk_mean", "logk_sd", "alpha_scale", "lapse", "delayed_reward"},
    "ces": {"slider_tau", "slider_eps", "logu_mean", "logu_sd", "basket_max"},
    "toy": {"variant", "support", "prior_masses", "p_base", "p_gain", "peak", "width"},
}


@dataclass
class ModelConfig:
    name: str = "location"
    constants: dict = field(default_factory=dict)

    def build(self) -> Model:
        return make_model(self.name, **self.constants)


@dataclass
class PolicyConfig:
    scale: str = "paper"  # paper | desk width presets
    pool_width: Optional[int] = None
    encoder_widths: Optional[list[int]] = None
    decoder_widths: Optional[list[int]] = None
    embed_width: Optional[int] = None

    def build_arch(self, model: Model) -> PolicyArch:
        arch = default_arch(model, self.scale)
        updates = {}
        if self.pool_width is not None:
            updates["pool_width"] = self.pool_width
        if self.encoder_widths is not None:
            updates["encoder_widths"] = tuple(self.encoder_widths)
        if self.decoder_widths is not None:
            updates["decoder_widths"] = tuple(self.decoder_widths)
        if self.embed_width is not None:
            updates["embed_width"] = self.embed_width
        return replace(arch, **updates)


@dataclass
class ScheduleConfig:
    horizon: int = 6
    taus: list[int] = field(default_factory=list)
    budgets: list[int] = field(default_factory=list)
    allow_extension: bool = False

    def build(self) -> RefinementSchedule:
        return RefinementSchedule(horizon=self.horizon, taus=list(self.taus), budgets=list(self.budgets))


@dataclass
class EvalConfig:
    contrasts: int = 1023
    n_rollouts: int = 256
    step_histories: int = 16
    methods: list[str] = field(default_factory=lambda: ["random", "amortized", "refined"])
    shifts: list[float] = field(default_factory=lambda: [0.0, 1.5, 3.0])
    ablation_budgets: list[int] = field(default_factory=lambda: [0, 250, 1000])
    ablation_seeds: int = 3


@dataclass
class IoConfig:
    checkpoint_dir: str = "artifacts/checkpoints"
    report_dir: str = "artifacts/reports"


@dataclass
class EngineConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: TrainConfig = field(default_factory=lambda: TrainConfig(steps=250))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def to_dict(self) -> dict:
        data = {"seed": self.seed}
        model = {"name": self.model.name, **self.model.constants}
        data["model"] = model
        for section in ("policy", "train", "refine", "schedule", "eval", "io"):
            block = asdict(getattr(self, section))
            data[section] = {k: v for k, v in block.items() if v is not None}
        return data


_SECTION_TYPES = {
    "policy": PolicyConfig,
    "train": TrainConfig,
    "refine": TrainConfig,
    "schedule": ScheduleConfig,
    "eval": EvalConfig,
    "io": IoConfig,
}


def _build_section(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid [{section}] block: {err}") from err


def _build_model_config(data: dict) -> ModelConfig:
    data = dict(data)
    name = data.pop("name", "location")
    base = name.split("-")[0]
    if base not in MODEL_NAMES:
        raise ConfigError(f"unknown model {name!r}; have {MODEL_NAMES}")
    allowed = ALLOWED_MODEL_KEYS[base]
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [model] for {name!r}: {sorted(unknown)}")
    return ModelConfig(name=name, constants=data)


def config_from_dict(data: dict) -> EngineConfig:
    data = dict(data)
    known = {"seed", "model"} | set(_SECTION_TYPES)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    cfg = EngineConfig(seed=int(data.get("seed", 0)))
    if "model" in data:
        cfg.model = _build_model_config(data["model"])
    for section, cls in _SECTION_TYPES.items():
        if section in data:
            setattr(cfg, section, _build_section(cls, data[section], section))
    return cfg


def load_config(path: str | Path) -> EngineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    return config_from_dict(data)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r} to TOML")


def serialize_toml(cfg: EngineConfig) -> str:
    data = cfg.to_dict()
    lines = [f"seed = {_toml_value(data.pop('seed'))}", ""]
    for section, block in data.items():
        lines.append(f"[{section}]")
        for key, value in block.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def serialize_json(cfg: EngineConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: EngineConfig, overrides: list[str]) -> EngineConfig:
    """Apply ``section.key=value`` (or ``seed=7``) flags onto a parsed config."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        dotted, raw = item.split("=", 1)
        value = _parse_value(raw)
        parts = dotted.strip().split(".")
        if len(parts) == 1:
            data[parts[0]] = value
        elif len(parts) == 2:
            data.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"override path too deep: {dotted!r}")
    return config_from_dict(data)
