from pydantic_settings import BaseSettings
from functools import lru_cache


class Settings(BaseSettings):
    # Parallelism
    threads: int = 1

    # Outputs
    output_root: str = "runs"
    record_wallclock: bool = False

    # App Settings
    app_name: str = "flowmc"
    debug: bool = False
    log_level: str = "INFO"

    class Config:
        env_file = ".env"
        env_prefix = "FLOWMC_"


@lru_cache()
def get_settings() -> Settings:
    return Settings()
