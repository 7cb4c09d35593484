import os
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict

class Settings(BaseSettings):
    # Application Configuration
    app_name: str = "Scene-Aware Motion Synthesis"
    debug: bool = False
    log_level: str = "INFO"

    # Workspace
    workspace_dir: str = "."
    workers: Optional[int] = None

    model_config = SettingsConfigDict(env_prefix="MOTION_", env_file=".env", case_sensitive=False, extra="ignore")

    @property
    def default_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

settings = Settings()
