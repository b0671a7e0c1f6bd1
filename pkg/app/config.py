"""
Configuration management for the ProtoFair harness.

Two layers:
  - Settings: process-level knobs (logging, telemetry export) from PROTOFAIR_* environment
    variables or a .env file.
  - ExperimentConfig: the full hyperparameter set, read from a flat JSON document.
"""

import json
import sys
from functools import lru_cache
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import (
    ConfigFileMissingError,
    ConfigRangeError,
    MalformedConfigError,
    UnknownConfigKeyError,
)
from .losses import LossConfig
from .models import EncoderConfig, LayerWidths
from .synth_data import AugmentSpec, DatasetSpec
from .trainer import TrainSchedule

VARIANTS = ("baseline", "protofair")


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""

    app_name: str = "ProtoFair Harness"
    app_version: str = "0.1.0"

    # Logging
    log_level: str = "INFO"
    log_format: str = "console"

    # Telemetry textfile written next to each run's outputs
    export_prometheus: bool = True
    prometheus_textfile: str = "training.prom"

    model_config = SettingsConfigDict(
        env_prefix="PROTOFAIR_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"log_level must be one of DEBUG, INFO, WARNING, ERROR, CRITICAL, got: {v}")
        return level

    @field_validator("log_format")
    @classmethod
    def validate_log_format(cls, v: str) -> str:
        fmt = v.lower()
        if fmt not in ("json", "console"):
            raise ValueError(f"log_format must be 'json' or 'console', got: {v}")
        return fmt

    @field_validator("prometheus_textfile")
    @classmethod
    def validate_textfile(cls, v: str) -> str:
        if not v or "/" in v or "\\" in v:
            raise ValueError(f"prometheus_textfile must be a bare file name, got: {v!r}")
        return v


# ─────────────────────────────────────────────────────────────────────────────
# Configuration Error Handling
# ─────────────────────────────────────────────────────────────────────────────

FIELD_DESCRIPTIONS = {
    "log_level": "DEBUG, INFO, WARNING, ERROR or CRITICAL",
    "log_format": "json (one object per line) or console (human readable)",
    "export_prometheus": "true to write a Prometheus textfile into each run directory",
    "prometheus_textfile": "file name of the Prometheus textfile, e.g. training.prom",
}


def print_config_error(missing_fields: list[str], invalid_fields: list[tuple[str, str]]) -> None:
    """Print a readable block describing bad PROTOFAIR_* settings to stderr."""
    out = sys.stderr
    print(file=out)
    print("=" * 79, file=out)
    print(" PROTOFAIR CONFIGURATION ERROR", file=out)
    print("=" * 79, file=out)
    print(file=out)

    if missing_fields:
        print(" Missing required variables:", file=out)
        for field in missing_fields:
            desc = FIELD_DESCRIPTIONS.get(field, "Required field")
            print(f"   ✗ PROTOFAIR_{field.upper():24} - {desc}", file=out)
        print(file=out)

    if invalid_fields:
        print(" Invalid values:", file=out)
        for field, msg in invalid_fields:
            print(f"   ✗ PROTOFAIR_{field.upper():24} - {msg}", file=out)
            if field in FIELD_DESCRIPTIONS:
                print(f"     {'':24}   expected: {FIELD_DESCRIPTIONS[field]}", file=out)
        print(file=out)

    print(" Fix the variables above in your environment or .env file.", file=out)
    print("=" * 79, file=out)
    print(file=out)


def load_settings() -> Settings:
    """Load settings, printing a readable error block and exiting with code 2 on failure."""
    try:
        return Settings()
    except ValidationError as e:
        missing_fields = []
        invalid_fields = []
        for error in e.errors():
            field_name = str(error["loc"][0]) if error["loc"] else "unknown"
            if error["type"] == "missing":
                missing_fields.append(field_name)
            else:
                invalid_fields.append((field_name, error.get("msg", "")))
        print_config_error(missing_fields, invalid_fields)
        sys.exit(2)


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return load_settings()


# ─────────────────────────────────────────────────────────────────────────────
# Experiment configuration
# ─────────────────────────────────────────────────────────────────────────────

class ExperimentConfig(BaseModel):
    """
    Flat experiment config. Every key is optional; unknown keys are rejected.

    Defaults are sized for a full five-seed run on one CPU core.
    """
    model_config = ConfigDict(extra="forbid")

    # Dataset
    n_samples: int = Field(4000, ge=8)
    input_dim: int = Field(16, ge=1)
    content_sep: float = Field(3.0, gt=0)
    bias_strength: float = Field(1.5, ge=0)
    group_corr: float = Field(0.8, ge=0.5, le=1.0)
    noise_sigma: float = Field(1.0, ge=0)
    data_seed: int = 0
    aug_sigma: float = Field(0.3, ge=0)
    drop_prob: float = Field(0.1, ge=0, le=1)
    data_dir: Optional[str] = None

    # Encoder and heads
    encoder_hidden: LayerWidths = Field(default_factory=lambda: [64])
    encoder_out_dim: int = Field(32, ge=1)
    head_hidden: int = Field(32, ge=1)
    embed_dim: int = Field(16, ge=1)

    # Prototypes
    num_clusters: int = Field(10, ge=2)
    prototype_momentum: float = Field(0.99, ge=0, lt=1)
    reinit_period: int = Field(5, ge=1)
    kmeans_max_iters: int = Field(100, ge=1)

    # Queue
    queue_batches: int = Field(8, ge=1)
    use_queue: bool = True

    # Losses
    temperature: float = Field(0.1, gt=0)
    lambda_fair: float = Field(0.3, ge=0)
    base_loss: Literal["simclr", "supcon"] = "simclr"

    # Schedule
    total_epochs: int = Field(30, ge=1)
    warmup_epochs: int = Field(10, ge=0)
    batch_size: int = Field(64, ge=2)

    # Optimizer
    base_lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)

    # Linear probe
    probe_epochs: int = Field(200, ge=1)
    probe_lr: float = Field(0.1, gt=0)

    # Run level
    seeds: List[int] = Field(default_factory=lambda: [0])
    variants: List[Literal["baseline", "protofair"]] = Field(default_factory=lambda: list(VARIANTS))
    output_dir: str = "out"
    dtype: Literal["float64", "float32"] = "float64"
    group_corr_sweep: List[float] = Field(default_factory=lambda: [0.67, 0.75, 0.8])

    @field_validator("seeds")
    @classmethod
    def validate_seeds(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("seeds must list at least one seed")
        if len(set(v)) != len(v):
            raise ValueError(f"seeds must be distinct, got {v}")
        return v

    @field_validator("variants")
    @classmethod
    def validate_variants(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("variants must list at least one of baseline, protofair")
        # canonical order, duplicates dropped
        return [name for name in VARIANTS if name in v]

    @field_validator("group_corr_sweep")
    @classmethod
    def validate_sweep(cls, v: List[float]) -> List[float]:
        bad = [rho for rho in v if not 0.5 <= rho <= 1.0]
        if bad:
            raise ValueError(f"group_corr_sweep values must lie in [0.5, 1], got {bad}")
        return v

    @model_validator(mode="after")
    def check_cross_field(self) -> "ExperimentConfig":
        if self.warmup_epochs > self.total_epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) exceeds total_epochs ({self.total_epochs})")
        if self.data_dir is None and self.input_dim < 3:
            raise ValueError(f"input_dim must be >= 3 for the synthetic dataset, got {self.input_dim}")
        if self.n_samples * 0.7 < self.num_clusters:
            raise ValueError(
                f"num_clusters ({self.num_clusters}) exceeds the training split of {self.n_samples} samples"
            )
        return self

    # Projections onto the component configs

    def dataset_spec(self, group_corr: Optional[float] = None) -> DatasetSpec:
        return DatasetSpec(
            n_samples=self.n_samples,
            input_dim=self.input_dim,
            content_sep=self.content_sep,
            bias_strength=self.bias_strength,
            group_corr=self.group_corr if group_corr is None else group_corr,
            noise_sigma=self.noise_sigma,
            seed=self.data_seed,
        )

    def augment_spec(self) -> AugmentSpec:
        return AugmentSpec(aug_sigma=self.aug_sigma, drop_prob=self.drop_prob)

    def encoder_config(self, input_dim: Optional[int] = None) -> EncoderConfig:
        return EncoderConfig(
            input_dim=self.input_dim if input_dim is None else input_dim,
            encoder_hidden=list(self.encoder_hidden),
            encoder_out_dim=self.encoder_out_dim,
            head_hidden=self.head_hidden,
            embed_dim=self.embed_dim,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(temperature=self.temperature, lambda_fair=self.lambda_fair)

    def schedule(self, seed: int, lambda_fair: Optional[float] = None) -> TrainSchedule:
        return TrainSchedule(
            warmup_epochs=self.warmup_epochs,
            total_epochs=self.total_epochs,
            batch_size=self.batch_size,
            reinit_period=self.reinit_period,
            base_loss=self.base_loss,
            lambda_fair=self.lambda_fair if lambda_fair is None else lambda_fair,
            temperature=self.temperature,
            seed=seed,
            num_clusters=self.num_clusters,
            prototype_momentum=self.prototype_momentum,
            kmeans_max_iters=self.kmeans_max_iters,
            queue_batches=self.queue_batches,
            use_queue=self.use_queue,
            base_lr=self.base_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )

    def lambda_for(self, variant: str) -> float:
        """Baseline runs the identical pipeline with lambda = 0."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        return 0.0 if variant == "baseline" else self.lambda_fair

    def for_variant(self, variant: str, seed: int) -> TrainSchedule:
        return self.schedule(seed, lambda_fair=self.lambda_for(variant))


def _format_loc(loc) -> str:
    return ".".join(str(part) for part in loc) if loc else "<root>"


def validate_config(data: dict) -> ExperimentConfig:
    """
    Validate a decoded config mapping.

    Raises:
        UnknownConfigKeyError: keys the experiment does not define
        ConfigRangeError: range, type or cross-field failures, each with its key path
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        unknown = [_format_loc(err["loc"]) for err in e.errors() if err["type"] == "extra_forbidden"]
        if unknown:
            raise UnknownConfigKeyError(unknown) from e
        problems = []
        for err in e.errors():
            # cross-field failures have an empty loc; name the fields from the message instead
            key = _format_loc(err["loc"])
            if key == "<root>":
                msg = err.get("msg", "")
                named = [name for name in ExperimentConfig.model_fields if name in msg]
                if named:
                    key = min(named, key=msg.find)
            problems.append((key, err.get("msg", err["type"])))
        raise ConfigRangeError(problems) from e


def parse_config(path: Path) -> ExperimentConfig:
    """
    Load and validate a UTF-8 JSON experiment config; missing keys take their defaults.

    Raises:
        ConfigFileMissingError, MalformedConfigError, UnknownConfigKeyError, ConfigRangeError
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigFileMissingError(f"config file not found: {path}")
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedConfigError(f"{path} is not valid UTF-8: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise MalformedConfigError(f"{path}: top level must be a JSON object, got {type(data).__name__}")
    return validate_config(data)
