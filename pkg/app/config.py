import logging
import os
from pathlib import Path
from typing import Optional, Union

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.exceptions import ConfigurationError
from app.schemas import RunConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-level settings, read from MM_SIM_* environment variables or .env."""

    # Episode-level worker processes; 0 = one per CPU
    threads: int = 1
    log_level: str = "INFO"
    config_path: str = "config/default.yaml"

    app_name: str = "Hawkes Market-Making Lab"
    app_version: str = "0.1.0"

    model_config = SettingsConfigDict(env_prefix="MM_SIM_", env_file=".env", extra="ignore")


settings = Settings()


def resolve_workers(workers: Optional[int] = None) -> int:
    """Explicit worker count, else MM_SIM_THREADS; 0 means all CPUs."""
    n = Settings().threads if workers is None else workers
    if n < 0:
        raise ConfigurationError(f"worker count must be >= 0, got {n}", key_path="MM_SIM_THREADS")
    return n or (os.cpu_count() or 1)


def _key_path(loc) -> str:
    return ".".join(str(part) for part in loc)


def load_config(path: Union[str, Path, None] = None) -> RunConfig:
    """Read and fully validate a YAML run configuration.

    Every failure (missing file, YAML syntax, schema violation) surfaces as a
    ConfigurationError; schema errors name the offending dotted key path.
    """
    path = Path(path or settings.config_path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigurationError(first["msg"], key_path=_key_path(first["loc"])) from exc
    logger.debug("loaded %s (hash %s)", path, config.config_hash()[:12])
    return config
