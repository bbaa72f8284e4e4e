import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from lab_config import TOOL_VERSION
from numerics import LabError

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = '.manifest.json'


class ManifestError(LabError, ValueError):
    """A manifest file is missing fields or cannot be parsed"""


def file_digest(path: str) -> str:
    """sha256 of a file's bytes, hex encoded"""
    sha = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(65536), b''):
            sha.update(chunk)
    return sha.hexdigest()


def manifest_path(out_path: str) -> str:
    return out_path + MANIFEST_SUFFIX


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    """
    Sidecar record of one CLI run: the command and argv that produced it,
    the resolved configuration, the seed and the digests of every input
    file, so the run can be replayed.
    """
    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: Optional[int] = None
    tool_version: str = TOOL_VERSION
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    input_file_digests: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    exit_code: Optional[int] = None

    def add_input(self, path: str) -> None:
        self.input_file_digests[path] = file_digest(path)

    def finish(self, exit_code: int) -> None:
        self.finished = _now()
        self.exit_code = exit_code

    def digest(self) -> str:
        """Stable id of the run's configuration (timestamps excluded)"""
        payload = json.dumps(
            {'command': self.command, 'argv': self.argv, 'config': self.config,
             'seed': self.seed, 'tool_version': self.tool_version,
             'inputs': self.input_file_digests},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: str) -> str:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')
        logger.info(f"Wrote manifest {path}")
        return path

    @classmethod
    def load(cls, path: str) -> 'RunManifest':
        """
        Raises:
            FileNotFoundError: no such manifest
            ManifestError: not JSON, or missing command/argv
        """
        with open(path, 'r', encoding='utf-8') as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}: not a valid manifest ({e})") from e
        if not isinstance(data, dict) or 'command' not in data or not isinstance(data.get('argv'), list):
            raise ManifestError(f"{path}: manifest needs 'command' and 'argv'")
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        known.setdefault('config', {})
        return cls(**known)

    def changed_inputs(self) -> List[str]:
        """Input files whose current digest differs from the recorded one"""
        changed = []
        for path, recorded in self.input_file_digests.items():
            if not os.path.exists(path) or file_digest(path) != recorded:
                changed.append(path)
        return changed
