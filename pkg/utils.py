"""File helpers shared by the command-line tools: hashing, CSV output, run manifests
and the output-directory guard."""
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union
import csv
import hashlib
import json
import logging

from gradibd.errors import OutputPathError

logger = logging.getLogger(__name__)


def sha256_file(path: Union[str, Path], chunk_size: int = 1 << 20) -> str:
    """SHA-256 of a file's bytes, read in chunks."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def resolve_inside(out_dir: Union[str, Path], target: Union[str, Path]) -> Path:
    """Resolve ``target`` relative to ``out_dir`` and refuse paths that escape it.

    Raises:
        OutputPathError: If the resolved path is not inside ``out_dir``.
    """
    root = Path(out_dir).resolve()
    path = Path(target)
    resolved = (path if path.is_absolute() else root / path).resolve()
    if resolved != root and root not in resolved.parents:
        raise OutputPathError(f"{target} is outside the output directory {root}")
    return resolved


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """Write rows with ``\\n`` line endings; floats use ``repr`` so they read back exactly."""
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
            count += 1
    return count


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


@dataclass
class RunManifest:
    """What produced the files of one output directory."""
    command: List[str]
    subcommand: str
    config: Dict[str, Any]
    inputs: Dict[str, str]
    seed: Optional[int]
    tool_version: str
    formats: Dict[str, int]
    started_at: str = ""
    finished_at: str = ""
    outputs: List[str] = field(default_factory=list)

    @staticmethod
    def now() -> str:
        return datetime.now(timezone.utc).isoformat(timespec="seconds")

    def hash_inputs(self, paths: Dict[str, Optional[Union[str, Path]]]) -> None:
        for name, path in paths.items():
            if path is not None and Path(path).is_file():
                self.inputs[name] = sha256_file(path)


def write_manifest(out_dir: Union[str, Path], manifest: RunManifest, name: str = "manifest.json") -> Path:
    """Append this run to the directory's single manifest file."""
    path = resolve_inside(out_dir, name)
    runs: List[Dict[str, Any]] = []
    if path.exists():
        try:
            runs = json.loads(path.read_text(encoding="utf-8")).get("runs", [])
        except json.JSONDecodeError as e:
            logger.error(f"Replacing unreadable manifest {path}: {e}")
    runs.append(asdict(manifest))
    path.parent.mkdir(exist_ok=True, parents=True)
    path.write_text(json.dumps({"runs": runs}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
