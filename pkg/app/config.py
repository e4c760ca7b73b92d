from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import model_validator
from functools import lru_cache


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # App
    app_name: str = "evodqn-bench"
    app_version: str = "1.0.0"
    debug: bool = False

    # Results service
    host: str = "127.0.0.1"
    port: int = 8000

    # Runs; OUTPUT_DIR overrides, the CLI --out flag overrides both
    output_dir: str = "runs"

    # Coordinator listener and serve-worker target; WORKER_PORT overrides
    worker_host: str = "127.0.0.1"
    worker_port: int = 7071

    # Straggler policy: a task is reassigned after
    # max(straggler_min_timeout_s, straggler_factor × median task time of the previous generation)
    straggler_factor: float = 10.0
    straggler_min_timeout_s: float = 5.0
    straggler_initial_timeout_s: float = 300.0

    broadcast_timeout_s: float = 30.0
    handshake_timeout_s: float = 10.0
    worker_join_timeout_s: float = 120.0

    # Limits
    max_checkpoint_size_mb: int = 64

    @model_validator(mode="after")
    def check_timeouts(self) -> "Settings":
        if self.straggler_factor <= 0 or self.straggler_min_timeout_s <= 0:
            raise ValueError("straggler timeouts must be positive")
        return self

    @property
    def max_checkpoint_size_bytes(self) -> int:
        return self.max_checkpoint_size_mb * 1024 * 1024

    @property
    def log_level(self) -> str:
        return "DEBUG" if self.debug else "INFO"


@lru_cache()
def get_settings() -> Settings:
    return Settings()
