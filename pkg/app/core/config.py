import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Optional, Union

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigurationError
from app.schemas.config import RunConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    PROJECT_NAME: str = "Episodic GCD Lab"
    VERSION: str = "1.0.0"
    API_STR: str = "/api"

    DATABASE_URL: str = "sqlite:///./runs.db"

    # Run artifacts
    OUTPUT_DIR: str = str(Path(os.getcwd()) / "runs")

    # Episodes of one global update run on this many threads
    N_WORKERS: int = 1
    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(case_sensitive=True, env_file=".env")


settings = Settings()


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Read a TOML run configuration; no path means all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid TOML: {e}")
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid config {path}: {e}")
    logger.info(f"Loaded run config from {path}")
    return config
