"""Application configuration"""
import hashlib
import json
from pathlib import Path
from typing import TYPE_CHECKING, List, Union

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings

from app.core.exceptions import ConfigError

if TYPE_CHECKING:
    from app.models.schemas import RunConfig


class Settings(BaseSettings):
    """Process settings loaded from environment variables"""

    # Output Configuration
    output_dir: str = Field(default="./runs", env="OUTPUT_DIR")

    # Parallelism
    threads: int = Field(default=1, env="THREADS")
    deterministic: bool = Field(default=False, env="DETERMINISTIC")

    # Numerical Defaults
    condition_threshold: float = Field(default=1e8, env="CONDITION_THRESHOLD")
    oracle_tolerance: float = Field(default=1e-10, env="ORACLE_TOLERANCE")
    oracle_max_nodes: int = Field(default=128, env="ORACLE_MAX_NODES")
    direct_poisson_max_nodes: int = Field(default=24, env="DIRECT_POISSON_MAX_NODES")

    # Server Configuration
    host: str = Field(default="0.0.0.0", env="HOST")
    port: int = Field(default=8000, env="PORT")
    reload: bool = Field(default=False, env="RELOAD")

    # CORS Configuration
    allowed_origins: str = Field(
        default="http://localhost:3000",
        env="ALLOWED_ORIGINS"
    )

    # Logging
    log_level: str = Field(default="INFO", env="LOG_LEVEL")
    log_format: str = Field(default="json", env="LOG_FORMAT")

    # API Configuration
    api_version: str = Field(default="v1", env="API_VERSION")
    api_title: str = Field(default="Vlasov-Poisson Asymptotics Lab", env="API_TITLE")
    api_description: str = Field(
        default="Read-only access to verdict reports of asymptotics runs",
        env="API_DESCRIPTION"
    )

    @property
    def allowed_origins_list(self) -> List[str]:
        """Parse allowed origins from comma-separated string"""
        return [origin.strip() for origin in self.allowed_origins.split(",")]

    @property
    def n_jobs(self) -> int:
        """Worker count for joblib maps (1 when deterministic)"""
        return 1 if self.deterministic else max(1, self.threads)

    model_config = {
        "protected_namespaces": (),
        "env_file": ".env",
        "case_sensitive": False
    }


# Global settings instance
settings = Settings()


def canonical_json(payload: dict) -> str:
    """Key-sorted compact JSON used for hashing"""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(payload: dict) -> str:
    """SHA-256 of the canonical JSON form of a config payload"""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def load_run_config(path: Union[str, Path]) -> "RunConfig":
    """
    Load and validate a run configuration file.

    Args:
        path: Path to a UTF-8 JSON document

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: File missing, malformed JSON (with line/column) or schema violation
            (with dotted field path)
    """
    from app.models.schemas import RunConfig

    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {str(e)}") from e

    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e

    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top-level value must be an object")

    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        problems = []
        for error in e.errors():
            location = ".".join(str(part) for part in error["loc"]) or "<root>"
            problems.append(f"{location}: {error['msg']}")
        raise ConfigError(f"{path}: invalid configuration; " + "; ".join(problems)) from e
