"""Run manifests: what a command did, with which resolved settings, so it can be replayed."""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from . import __version__
from .errors import ConfigError

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    version: str = __version__
    threads: int = 1
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: Optional[float] = None

    @property
    def deterministic(self) -> bool:
        return self.threads == 1

    def finish(self) -> "RunManifest":
        self.finished = time.time()
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["deterministic"] = self.deterministic
        return data


def manifest_path_for(output: PathLike) -> Path:
    """``manifest.json`` inside an output directory, ``<file>.manifest.json`` next to a file."""
    output = Path(output)
    if output.is_dir():
        return output / MANIFEST_NAME
    return output.with_name(output.name + ".manifest.json")


def write_manifest(manifest: RunManifest, path: PathLike) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(manifest.to_dict(), f, indent=2, sort_keys=True, allow_nan=True)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    logging.debug(f"Wrote run manifest {path}")
    return path


def read_manifest(path: PathLike) -> RunManifest:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not a valid manifest: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: not a valid manifest: expected a JSON object")
    data.pop("deterministic", None)
    try:
        manifest = RunManifest(**data)
    except TypeError as e:
        raise ConfigError(f"{path}: unexpected manifest fields: {e}") from e
    if not manifest.argv or manifest.argv[0] != manifest.command:
        raise ConfigError(f"{path}: argv does not start with command '{manifest.command}'")
    return manifest
