"""Configuration management for MixTTT."""

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process settings loaded from MIXTTT_* environment variables."""

    # Parallelism
    threads: int = 1

    # Logging
    log_level: str = "INFO"
    log_file: str = "run.log"

    @property
    def thread_cap(self) -> int:
        """Number of worker threads, never below one"""
        return max(1, self.threads)

    model_config = SettingsConfigDict(
        env_prefix="MIXTTT_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


# Global settings instance
settings = Settings()
