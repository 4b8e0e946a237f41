#!/usr/bin/env python3
"""
Scheduling toolkit - Configuration Settings

Centralises every configuration section (logging, synthetic workload,
environment, training, evaluation) with environment-variable support and
validation of the critical parameters.

Sources, lowest priority first: defaults, `.env` file, `SCHEDRL_*`
environment variables, TOML config file, command-line overrides.
"""

import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.exceptions import ConfigError
from app.models import Goal


class LoggingSection(BaseModel):
    """Logging sinks."""

    level: str = Field(default="INFO", description="Minimum log level")
    file: Optional[str] = Field(default=None, description="Log file path, console only when unset")
    json_logs: bool = Field(default=False, description="Write a serialized JSON sink next to the file")

    @field_validator("level")
    @classmethod
    def validate_level(cls, v: str) -> str:
        v = v.upper()
        if v not in {"TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {v}")
        return v


class SyntheticConfig(BaseModel):
    """Parameters of the synthetic trace generator."""

    cluster_size: int = Field(default=256, gt=0, description="Processors in the cluster")
    job_count: int = Field(default=10000, ge=0, description="Jobs to generate")
    arrival_rate: float = Field(default=0.003, gt=0, description="Mean arrivals per second")
    runtime_min: int = Field(default=10, gt=0, description="Smallest runtime (s)")
    runtime_max: int = Field(default=36000, gt=0, description="Largest runtime (s)")
    proc_min: int = Field(default=1, gt=0, description="Smallest processor request")
    proc_max: int = Field(default=64, gt=0, description="Largest processor request")
    user_count: int = Field(default=16, gt=0, description="Distinct user ids")
    estimate_factor_max: float = Field(default=1.0, ge=1.0, description="requested = runtime * U(1, factor)")

    @model_validator(mode="after")
    def validate_ranges(self) -> "SyntheticConfig":
        if self.runtime_min > self.runtime_max:
            raise ValueError("runtime_min must not exceed runtime_max")
        if self.proc_min > self.proc_max:
            raise ValueError("proc_min must not exceed proc_max")
        return self


class EnvironmentSection(BaseModel):
    """Observation and simulator options."""

    max_obsv_size: int = Field(default=128, gt=0, description="Observable pending jobs")
    mask_non_runnable: bool = Field(default=False, description="Only jobs that fit now are legal")
    user_feature: bool = Field(default=False, description="Append per-user mean wait to each row")
    debug_checks: bool = Field(default=False, description="Check resource conservation after every event")


class PpoConfig(BaseModel):
    """Training hyper-parameters."""

    trajectories_per_epoch: int = Field(default=100, gt=0)
    trajectory_len: int = Field(default=256, gt=0)
    update_iterations: int = Field(default=80, gt=0, description="Gradient steps for policy and for value")
    learning_rate: float = Field(default=1e-3, gt=0)
    clip_ratio: float = Field(default=0.2)
    gamma: float = Field(default=1.0, gt=0, le=1.0)
    gae_lambda: float = Field(default=0.97, gt=0, le=1.0)
    target_kl: float = Field(default=0.015, gt=0)
    epochs: int = Field(default=50, ge=0)
    seed: int = Field(default=0, ge=0)
    goal: Goal = Field(default=Goal.AVG_BSLD)
    filtering: bool = Field(default=False, description="Two-step training with trajectory filtering")
    filter_samples: int = Field(default=100, ge=30, description="SJF samples used for the filter range")
    filter_step1_epochs: Optional[int] = Field(default=None, ge=0, description="Phase-1 epochs, half by default")
    rejection_cap: int = Field(default=50, gt=0)
    backfilling: bool = Field(default=False, description="Backfill while training")
    workers: int = Field(default=1, gt=0)
    max_diverged_epochs: int = Field(default=3, gt=0)

    @field_validator("clip_ratio")
    @classmethod
    def validate_clip_ratio(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError("clip_ratio must be in (0, 1)")
        return v

    @property
    def step1_epochs(self) -> int:
        """Number of filtered epochs before training on every sequence."""
        if not self.filtering:
            return 0
        if self.filter_step1_epochs is None:
            return self.epochs // 2
        return min(self.filter_step1_epochs, self.epochs)


class RunConfig(BaseModel):
    """Evaluation run defaults."""

    traces: List[str] = Field(default_factory=list, description="SWF files, synthetic when empty")
    goal: Goal = Field(default=Goal.AVG_BSLD)
    schedulers: List[str] = Field(default_factory=lambda: ["fcfs", "wfp3", "unicep", "sjf", "f1"])
    backfilling: bool = Field(default=True)
    both_modes: bool = Field(default=False, description="Evaluate with and without backfilling")
    sequence_length: int = Field(default=1024, gt=0)
    repetitions: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)
    output_dir: str = Field(default="runs/latest")
    max_jobs: Optional[int] = Field(default=None, gt=0, description="Keep only the first N jobs of each trace")


class ToolkitSettings(BaseSettings):
    """Main configuration of the toolkit."""

    logging: LoggingSection = Field(default_factory=LoggingSection)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)
    environment: EnvironmentSection = Field(default_factory=EnvironmentSection)
    training: PpoConfig = Field(default_factory=PpoConfig)
    evaluation: RunConfig = Field(default_factory=RunConfig)

    model_config = SettingsConfigDict(
        env_prefix="SCHEDRL_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


def deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


def parse_override(assignment: str) -> Dict[str, Any]:
    """Turn "section.key=value" into a nested dict.

    The value is read as a TOML literal when possible (numbers, booleans,
    quoted strings, arrays) and kept as a bare string otherwise.
    """
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value: {assignment!r}")
    path, raw = assignment.split("=", 1)
    keys = [k.strip() for k in path.strip().split(".") if k.strip()]
    if not keys:
        raise ConfigError(f"empty key in override {assignment!r}")
    raw = raw.strip()
    try:
        value: Any = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw

    nested: Dict[str, Any] = {keys[-1]: value}
    for key in reversed(keys[:-1]):
        nested = {key: nested}
    return nested


def load_settings(
    config_path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ToolkitSettings:
    """Build settings from an optional TOML file plus overrides.

    Raises:
        ConfigError: unreadable file or values failing validation
    """
    data: Dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid config file {path}: {e}") from e
    if overrides:
        data = deep_merge(data, overrides)

    try:
        return ToolkitSettings(**data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return json.dumps(str(value))


def dump_settings(settings: ToolkitSettings) -> str:
    """Render settings as TOML text (unset optional keys are omitted)."""
    lines: List[str] = []
    for section, values in settings.model_dump(mode="json").items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if value is None:
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def settings_hash(settings: ToolkitSettings) -> str:
    """Stable digest of the merged configuration."""
    return hashlib.sha256(dump_settings(settings).encode("utf-8")).hexdigest()[:16]
