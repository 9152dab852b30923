"""Configuration management for the din command line."""
import logging
import os
from pathlib import Path
from dotenv import load_dotenv

# Load .env before the flat modules read DIN_RUNS_DIR / DIN_PROFILES_DIR
load_dotenv()


class Config:
    """Process configuration. Model and training hyperparameters live in JSON config files instead."""

    # Logging
    LOG_LEVEL: str = os.getenv("DIN_LOG_LEVEL", "INFO").upper()

    # Source tree holding the flat module directory
    DIN_SRC_PATH: Path = Path(os.getenv("DIN_SRC_PATH", "./din_src"))

    @classmethod
    def validate(cls) -> None:
        """Validate configuration values."""
        if not isinstance(logging.getLevelName(cls.LOG_LEVEL), int):
            raise ValueError(f"DIN_LOG_LEVEL must be a logging level name, got '{cls.LOG_LEVEL}'.")


# Validate config on import
Config.validate()
