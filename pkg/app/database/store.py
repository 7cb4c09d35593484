from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union
import logging
import threading

from app.core.editor import Autoencoder
from app.core.errors import ConfigError
from app.core.motion_db import MotionDatabase, load_database
from app.core.ppo import PolicyBundle
from app.core.scene import SceneWorld, load_scene
from app.models.base import SceneConfig

logger = logging.getLogger(__name__)

class ArtifactStore:
    """
    Process-wide cache of loaded artifacts (motion databases, scenes, policy
    bundles, autoencoders). Entries are keyed by resolved path and file
    modification time, so a rewritten file is reloaded on the next request.
    """
    _instance = None
    _lock = threading.Lock()

    def __new__(cls):
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super(ArtifactStore, cls).__new__(cls)
                    cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if not self._initialized:
            self._cache: Dict[Tuple, Any] = {}
            self._cache_lock = threading.RLock()
            self._initialized = True

    def _get(self, kind: str, path: Union[str, Path], loader: Callable[[Path], Any], extra: Tuple = ()) -> Any:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{kind} not found: {path}")
        key = (kind, str(path.resolve()), path.stat().st_mtime_ns) + tuple(extra)
        with self._cache_lock:
            if key not in self._cache:
                # drop stale versions of the same file
                for old in [k for k in self._cache if k[:2] == key[:2]]:
                    del self._cache[old]
                self._cache[key] = loader(path)
                logger.info(f"Cached {kind} from {path}")
            return self._cache[key]

    def database(self, path: Union[str, Path]) -> MotionDatabase:
        return self._get("motion database", path, load_database)

    def scene(self, path: Union[str, Path], config: Optional[SceneConfig] = None) -> SceneWorld:
        config = config or SceneConfig()
        extra = (config.unit_scale, config.floor_height, config.hash_cell)
        return self._get("scene mesh", path, lambda p: load_scene(p, config), extra)

    def policy(self, path: Union[str, Path]) -> PolicyBundle:
        # callers fine-tune in place, so hand out copies
        return self._get("policy", path, PolicyBundle.load).copy()

    def autoencoder(self, path: Union[str, Path]) -> Autoencoder:
        return self._get("autoencoder", path, Autoencoder.load)

    def clear(self):
        with self._cache_lock:
            self._cache.clear()

    def __len__(self):
        return len(self._cache)

    def close(self):
        """Release cached artifacts"""
        self.clear()
        logger.info("Artifact store cleared")

def get_store() -> ArtifactStore:
    """Get the singleton artifact store"""
    return ArtifactStore()
