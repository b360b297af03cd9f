import os
from pathlib import Path
from typing import Any, Optional

from loguru import logger

from .config import settings
from .integrity import fingerprint_json


class ArtifactStore:
    """Content-addressed stage artifacts on the local filesystem.

    A key is the SHA-256 of a stage name, its config and the keys of the
    artifacts it consumed, so identical inputs always land on the same file.
    """

    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root or settings.artifact_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(stage: str, config: Any, *upstream: str) -> str:
        """Derive the content address of a stage output"""
        return f"{stage}-{fingerprint_json({'stage': stage, 'config': config, 'upstream': list(upstream)})[:24]}"

    def path(self, key: str, suffix: str = ".bin") -> Path:
        return self.root / f"{key}{suffix}"

    def get(self, key: str, suffix: str = ".bin") -> Optional[Path]:
        """Get artifact path if present"""
        path = self.path(key, suffix)
        if path.exists():
            logger.debug(f"Artifact hit: {path.name}")
            return path
        logger.debug(f"Artifact miss: {path.name}")
        return None

    def set(self, key: str, payload: bytes, suffix: str = ".bin") -> Path:
        """Write artifact bytes atomically"""
        path = self.path(key, suffix)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)
        logger.info(f"Stored artifact {path.name} ({len(payload)} bytes)")
        return path
