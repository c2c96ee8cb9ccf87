"""Run manifests written next to every output file."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"


@dataclass
class RunManifest:
    """Everything needed to re-run the command that produced an output."""

    subcommand: str
    config_path: str | None
    scene_hash: str
    version: str
    outputs: list[str] = field(default_factory=list)
    duration_s: float = 0.0
    seed: int | None = None
    profile: str | None = None
    argv: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def manifest_path(output: Path) -> Path:
    return output.with_name(output.stem + MANIFEST_SUFFIX)


def write_manifest(manifest: RunManifest, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote manifest {path}")
    return path


def read_manifest(path: Path) -> RunManifest | None:
    """Load a manifest, or None if it is missing or unreadable."""
    if not path.exists():
        return None
    try:
        data = json.loads(path.read_text())
        return RunManifest(**data)
    except (json.JSONDecodeError, OSError, TypeError) as e:
        # Corrupted manifest
        logger.warning(f"Ignoring unreadable manifest {path}: {e}")
        return None
