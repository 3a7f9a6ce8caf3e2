"""
Configuration management for ckmm experiments.

Settings come from ``CKMM_*`` environment variables (optionally loaded from a
``.env`` file), then command-line flags, then a JSON ``--config`` file, each
layer overriding the previous one.
"""

import os
import json
import logging
from dataclasses import dataclass, asdict, fields, replace
from typing import Optional, Dict, Any, Tuple
from pathlib import Path

from dotenv import load_dotenv

from ckmm.errors import CkmmError
from ckmm.mixture import FitConfig


class ConfigurationError(CkmmError):
    """Raised when configuration validation fails."""
    code = "INVALID_CONFIG"


def _default_threads() -> int:
    return os.cpu_count() or 1


@dataclass
class ExperimentConfig:
    """Settings shared by every ckmm command."""
    # Data and outputs
    scenario: Optional[str] = None
    scenario_file: Optional[str] = None
    data: Optional[str] = None
    manifest: Optional[str] = None
    fits: Optional[str] = None
    out: str = "ckmm_output"

    # Simulation
    count: int = 1
    T: Optional[int] = None
    n_subjects: Optional[int] = None

    # Cluster counts
    G: int = 2
    g_min: int = 1
    g_max: int = 5

    # Preprocessing
    difference: bool = False
    standardize: bool = False

    # GEM settings (see ckmm.mixture.FitConfig)
    epsilon: float = 1e-5
    max_iterations: int = 200
    restarts: int = 10
    eta: float = 1e-2
    delta_h: float = 1e-2
    bandwidth_bounds: Tuple[float, float] = (0.05, 3.0)
    max_bandwidth_substeps: int = 10
    ridge: float = 1e-8
    kde_evaluation: str = "exact"
    seed: int = 0
    threads: int = 1

    # Wall-clock runtimes break byte-identical reruns; off by default
    record_runtime: bool = False

    # Logging configuration
    log_level: str = "INFO"
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    log_file: Optional[str] = None

    def validate(self) -> None:
        """
        Validate configuration settings before any computation.

        Raises:
            ConfigurationError: If any setting is missing or invalid
        """
        errors = []

        for name in ("count", "G", "g_min", "g_max"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                errors.append(f"{name} must be a positive integer, got {value!r}")
        if isinstance(self.g_min, int) and isinstance(self.g_max, int) and self.g_min > self.g_max:
            errors.append(f"g_min must not exceed g_max, got {self.g_min} > {self.g_max}")
        for name in ("T", "n_subjects"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, int) or value < 2):
                errors.append(f"{name} must be an integer of at least 2, got {value!r}")
        if self.scenario is not None and self.scenario_file is not None:
            errors.append("scenario and scenario_file are mutually exclusive")

        try:
            self.to_fit_config().validate()
        except CkmmError as e:
            errors.append(str(e))

        valid_log_levels = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
        if not isinstance(self.log_level, str) or self.log_level.upper() not in valid_log_levels:
            errors.append(f"log_level must be one of {valid_log_levels}, got {self.log_level}")

        if errors:
            raise ConfigurationError(f"Configuration validation failed: {'; '.join(errors)}")

    def to_fit_config(self) -> FitConfig:
        """GEM settings for ckmm.mixture.fit."""
        return FitConfig(
            epsilon=self.epsilon,
            max_iterations=self.max_iterations,
            restarts=self.restarts,
            eta=self.eta,
            delta_h=self.delta_h,
            bandwidth_bounds=tuple(self.bandwidth_bounds),
            max_bandwidth_substeps=self.max_bandwidth_substeps,
            ridge=self.ridge,
            kde_evaluation=self.kde_evaluation,
            seed=self.seed,
            threads=self.threads,
        )

    @classmethod
    def from_env(cls) -> 'ExperimentConfig':
        """
        Load configuration from environment variables (and a ``.env`` file).

        Returns:
            ExperimentConfig: Configuration instance loaded from environment variables

        Raises:
            ConfigurationError: If a variable cannot be parsed
        """
        load_dotenv()
        try:
            return cls(
                threads=int(os.getenv("CKMM_THREADS", str(_default_threads()))),
                seed=int(os.getenv("CKMM_SEED", "0")),
                restarts=int(os.getenv("CKMM_RESTARTS", "10")),
                out=os.getenv("CKMM_OUTPUT_DIR", "ckmm_output"),
                record_runtime=os.getenv("CKMM_RECORD_RUNTIME", "false").lower() == "true",
                log_level=os.getenv("CKMM_LOG_LEVEL", "INFO"),
                log_file=os.getenv("CKMM_LOG_FILE"),
            )
        except ValueError as e:
            raise ConfigurationError(f"Invalid environment variable value: {e}")

    def merged(self, values: Dict[str, Any], source: str) -> 'ExperimentConfig':
        """
        Copy with ``values`` applied; ``None`` entries are ignored.

        Raises:
            ConfigurationError: If a key is not a configuration field
        """
        known = {f.name for f in fields(self)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"Unknown configuration keys in {source}: {', '.join(unknown)}")
        updates = {k: v for k, v in values.items() if v is not None}
        if "bandwidth_bounds" in updates:
            updates["bandwidth_bounds"] = tuple(updates["bandwidth_bounds"])
        return replace(self, **updates)

    @classmethod
    def from_file(cls, config_file: str, base: Optional['ExperimentConfig'] = None) -> 'ExperimentConfig':
        """
        Load configuration from a JSON file on top of ``base``.

        Args:
            config_file: Path to configuration file
            base: Settings the file overrides (defaults when omitted)

        Returns:
            ExperimentConfig: Configuration instance loaded from file

        Raises:
            ConfigurationError: If the file is missing, invalid or has unknown keys
        """
        config_path = Path(config_file)
        if not config_path.exists():
            raise ConfigurationError(f"Configuration file not found: {config_file}")

        try:
            with open(config_path, 'r') as f:
                config_data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Invalid JSON in configuration file: {e}")
        except Exception as e:
            raise ConfigurationError(f"Error loading configuration file: {e}")

        if not isinstance(config_data, dict):
            raise ConfigurationError("Configuration file must contain a JSON object")
        return (base or cls()).merged(config_data, str(config_file))

    def to_dict(self) -> Dict[str, Any]:
        """Convert configuration to dictionary."""
        data = asdict(self)
        data["bandwidth_bounds"] = list(self.bandwidth_bounds)
        return data

    def setup_logging(self) -> logging.Logger:
        """
        Configure the ckmm logger.

        Returns:
            logging.Logger: Configured logger instance
        """
        logger = logging.getLogger("ckmm")
        logger.setLevel(getattr(logging, self.log_level.upper()))

        # Clear existing handlers
        logger.handlers.clear()

        formatter = logging.Formatter(self.log_format)

        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

        if self.log_file:
            try:
                file_handler = logging.FileHandler(self.log_file)
                file_handler.setFormatter(formatter)
                logger.addHandler(file_handler)
            except Exception as e:
                logger.warning(f"Could not set up file logging: {e}")

        return logger


def load_config(config_file: Optional[str] = None,
                overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load and validate configuration.

    Environment variables come first, explicit ``overrides`` (command-line
    flags) replace them, and a configuration file replaces both.

    Args:
        config_file: Optional path to a JSON configuration file
        overrides: Optional settings, ``None`` values ignored

    Returns:
        ExperimentConfig: Validated configuration instance

    Raises:
        ConfigurationError: If configuration validation fails
    """
    config = ExperimentConfig.from_env()
    if overrides:
        config = config.merged(overrides, "command-line flags")
    if config_file:
        config = ExperimentConfig.from_file(config_file, base=config)
    config.validate()
    return config
