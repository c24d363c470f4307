"""Configuration module."""

from fleetaug.config.settings import (
    ConfigError,
    DecodeConfig,
    ExperimentConfig,
    PayloadMode,
    Policy,
    format_run_config,
    load_run_config,
    parse_run_config,
)

__all__ = [
    "ConfigError",
    "DecodeConfig",
    "ExperimentConfig",
    "PayloadMode",
    "Policy",
    "format_run_config",
    "load_run_config",
    "parse_run_config",
]
