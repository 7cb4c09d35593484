from pathlib import Path
from typing import Union
import logging

from app.config import settings
from app.core.pipeline import with_scene_config
from app.database.store import ArtifactStore, get_store
from app.models.base import RunConfig

logger = logging.getLogger(__name__)

def get_artifact_store() -> ArtifactStore:
    """Dependency to get the shared artifact store"""
    return get_store()

def workspace_path(path: Union[str, Path]) -> Path:
    """Relative request paths are taken inside the configured workspace"""
    path = Path(path)
    return path if path.is_absolute() else Path(settings.workspace_dir) / path

def workspace_config(config: RunConfig) -> RunConfig:
    """Copy of a request's run config with paths resolved against the workspace and the scene config file applied"""
    resolved = config.model_copy(deep=True)
    for name, value in resolved.paths.model_dump().items():
        if value:
            setattr(resolved.paths, name, str(workspace_path(value)))
    if resolved.synthesizer.debug_dump_path:
        resolved.synthesizer.debug_dump_path = str(workspace_path(resolved.synthesizer.debug_dump_path))
    return with_scene_config(resolved)
