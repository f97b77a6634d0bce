import os
from functools import lru_cache

# Load dotenv manually to ensure .env files are loaded
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    DEBUG: bool = False

    # Logging Configuration
    LOG_LEVEL: str = os.environ.get('LOG_LEVEL', "INFO")
    LOG_FORMAT: str = os.environ.get('LOG_FORMAT', "json")

    # Output Configuration
    DEFAULT_OUTPUT_DIR: str = os.environ.get('DEFAULT_OUTPUT_DIR', "runs")
    DEFAULT_WORKERS: int = 1

    # Servo calibration targets (loop resonance height and position)
    CALIBRATION_TARGET_PEAK_DB: float = 10.0
    CALIBRATION_TARGET_FREQUENCY_HZ: float = 180e3

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level is one of the standard levels."""
        valid_levels = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
        if v.upper() not in valid_levels:
            raise ValueError(f"LOG_LEVEL must be one of {valid_levels}")
        return v.upper()

    @field_validator("LOG_FORMAT")
    @classmethod
    def validate_log_format(cls, v: str) -> str:
        valid_formats = {"json", "console"}
        if v.lower() not in valid_formats:
            raise ValueError(f"LOG_FORMAT must be one of {valid_formats}")
        return v.lower()

    @field_validator("DEFAULT_WORKERS")
    @classmethod
    def validate_workers(cls, v: int) -> int:
        if v < 1:
            raise ValueError("DEFAULT_WORKERS must be at least 1")
        return v

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )


@lru_cache()
def get_settings() -> Settings:
    return Settings()
