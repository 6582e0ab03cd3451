import logging
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    # Execution
    threads: Optional[int] = None  # BYZFL_THREADS, caps client worker threads
    parallelism: int = 1  # concurrent trials

    # Output
    output_dir: str = "results"
    record_timing: bool = True  # false → elapsed_s written as 0.0, CSVs byte-stable

    # Logging
    log_level: str = "INFO"

    # Protocol defaults
    eval_interval: int = 10
    test_fraction: float = 0.2
    power_iters: int = 100

    # API
    api_host: str = "0.0.0.0"
    api_port: int = 8000

    model_config = SettingsConfigDict(
        env_prefix="BYZFL_",
        env_file=None,
        extra="ignore",  # unrelated BYZFL_* variables must not break startup
    )


settings = Settings()

logger.debug(f"🔧 Settings loaded: threads={settings.threads}, output_dir={settings.output_dir}")
