from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="SCOP_", env_file=".env", extra="ignore")

    # Application
    app_name: str = "scop"
    app_description: str = "Filter pruning with a knockoff scientific control"
    app_version: str = "1.0.0"
    debug: bool = False

    # Storage
    data_dir: Path = Path("data")
    artifact_dir: Path = Path("artifacts")
    metrics_path: Path = Path("artifacts/metrics.jsonl")

    # Batch normalization
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    # Knockoffs
    knockoff_ridge: float = 1e-3
    knockoff_chunk: int = 1024

    # Reports
    histogram_bins: int = 64

    # Logging
    log_level: str = "INFO"
    log_serialize: bool = False
    log_format: str = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function} - {message}"


settings = Settings()
