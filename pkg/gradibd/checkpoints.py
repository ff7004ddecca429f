# checkpoints.py
"""Checkpoint storage: per-fold model files, score files and training traces."""
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Union
import csv
import json
import logging

import numpy as np
from numpy.lib import format as npy_format

from gradibd import CHECKPOINT_FORMAT_VERSION
from gradibd.diff_core import AdamState
from gradibd.errors import CheckpointFormatError, ParseError

logger = logging.getLogger(__name__)

MAGIC = b"GRADIBD-CKPT\n"
PARAMS_FILE = "params.ckpt"
SCORES_FILE = "scores.csv"
TRACE_FILE = "trace.csv"
VOCAB_FILE = "vocab.txt"
CONFIG_FILE = "config.txt"
SCORE_FIELDS = ("patient_id", "label", "score")


class ScoreRow(NamedTuple):
    patient_id: str
    label: int
    score: float


class Checkpoint(NamedTuple):
    """One fold's model: parameters, the optimizer state that goes with them and the run config."""
    params: Dict[str, np.ndarray]
    adam: Optional[AdamState] = None
    config_text: str = ""
    meta: Optional[Dict[str, Any]] = None


ADAM_SCALARS = ("lr", "beta1", "beta2", "eps", "step")


def _checkpoint_arrays(checkpoint: Checkpoint) -> Dict[str, np.ndarray]:
    arrays = dict(checkpoint.params)
    if checkpoint.adam is not None:
        for moment in ("m", "v"):
            for name, array in getattr(checkpoint.adam, moment).items():
                arrays[f"adam.{moment}.{name}"] = array
    return arrays


def write_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    """Write a checkpoint in a fixed byte layout.

    The file is the magic line, one JSON header line and the arrays in ``.npy``
    encoding, in header order: parameters first, then the Adam first and
    second moments as ``adam.m.<name>`` and ``adam.v.<name>``. The header holds
    the names and shapes, the Adam scalars, the run configuration text and
    ``meta``. Same checkpoint, same bytes.
    """
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    arrays = _checkpoint_arrays(checkpoint)
    adam = checkpoint.adam
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "names": list(arrays),
        "shapes": [list(a.shape) for a in arrays.values()],
        "params": list(checkpoint.params),
        "adam": None if adam is None else {k: getattr(adam, k) for k in ADAM_SCALARS},
        "config": checkpoint.config_text,
        "meta": checkpoint.meta or {},
    }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n")
        for array in arrays.values():
            npy_format.write_array(f, np.ascontiguousarray(array, dtype=np.float64), allow_pickle=False)


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Inverse of ``write_checkpoint``.

    Raises:
        CheckpointFormatError: On a foreign file, another format version, or
            arrays that are missing or disagree with the header.
    """
    path = Path(path)
    with open(path, "rb") as f:
        if f.readline() != MAGIC:
            raise CheckpointFormatError(f"{path} is not a gradibd checkpoint")
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise CheckpointFormatError(f"{path}: unreadable header ({e})") from None
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointFormatError(
                f"{path}: format version {header.get('format_version')!r}, expected {CHECKPOINT_FORMAT_VERSION}")
        arrays = {}
        for name, shape in zip(header["names"], header["shapes"]):
            try:
                array = npy_format.read_array(f, allow_pickle=False)
            except ValueError as e:
                raise CheckpointFormatError(f"{path}: truncated array {name!r} ({e})") from None
            if list(array.shape) != shape:
                raise CheckpointFormatError(f"{path}: array {name!r} has shape {array.shape}, header says {shape}")
            arrays[name] = array

    missing = [name for name in header["params"] if name not in arrays]
    if missing:
        raise CheckpointFormatError(f"{path}: header lists parameters {missing} without arrays")
    params = {name: arrays[name] for name in header["params"]}
    adam = None
    if header["adam"] is not None:
        scalars = header["adam"]
        adam = AdamState(lr=float(scalars["lr"]), beta1=float(scalars["beta1"]), beta2=float(scalars["beta2"]),
                         eps=float(scalars["eps"]), step=int(scalars["step"]),
                         m={n[len("adam.m."):]: a for n, a in arrays.items() if n.startswith("adam.m.")},
                         v={n[len("adam.v."):]: a for n, a in arrays.items() if n.startswith("adam.v.")})
    return Checkpoint(params, adam, header["config"], header["meta"])


def write_scores(path: Union[str, Path], rows: Sequence[ScoreRow]) -> None:
    """patient_id, label, score per line; scores written with ``repr`` so they read back exactly."""
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SCORE_FIELDS)
        for row in rows:
            writer.writerow([row.patient_id, row.label, repr(float(row.score))])


def read_scores(path: Union[str, Path]) -> List[ScoreRow]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        if tuple(next(reader, ())) != SCORE_FIELDS:
            raise ParseError(f"{path}: expected header {','.join(SCORE_FIELDS)}", line_no=1)
        rows = []
        for line_no, values in enumerate(reader, start=2):
            try:
                patient_id, label, score = values
                rows.append(ScoreRow(patient_id, int(label), float(score)))
            except ValueError:
                raise ParseError(f"{path}: bad score row {values!r}", line_no=line_no) from None
    return rows


def write_trace(path: Union[str, Path], fields: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


class CheckpointManager:
    """Lays out a training run: ``vocab.txt``, ``config.txt`` and one ``fold_XX/`` per fold."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def fold_dir(self, fold: int) -> Path:
        return self.directory / f"fold_{fold:02d}"

    def params_path(self, fold: int) -> Path:
        return self.fold_dir(fold) / PARAMS_FILE

    def scores_path(self, fold: int) -> Path:
        return self.fold_dir(fold) / SCORES_FILE

    def trace_path(self, fold: int) -> Path:
        return self.fold_dir(fold) / TRACE_FILE

    @property
    def vocab_path(self) -> Path:
        return self.directory / VOCAB_FILE

    @property
    def config_path(self) -> Path:
        return self.directory / CONFIG_FILE

    def folds(self) -> List[int]:
        """Fold numbers that have a parameter file, ascending."""
        if not self.directory.exists():
            return []
        found = []
        for child in sorted(self.directory.glob("fold_*")):
            if (child / PARAMS_FILE).exists():
                try:
                    found.append(int(child.name.split("_", 1)[1]))
                except ValueError:
                    logger.warning(f"Ignoring unexpected directory {child}")
        return sorted(found)

    def save_fold(self, fold: int, checkpoint: Checkpoint) -> Path:
        path = self.params_path(fold)
        write_checkpoint(path, checkpoint)
        logger.info(f"Saved fold {fold} checkpoint to {path}")
        return path

    def load_fold(self, fold: int) -> Checkpoint:
        path = self.params_path(fold)
        if not path.exists():
            raise CheckpointFormatError(f"missing checkpoint {path}")
        return read_checkpoint(path)

    def save_config_text(self, text: str) -> None:
        self.directory.mkdir(exist_ok=True, parents=True)
        self.config_path.write_text(text, encoding="utf-8")

    def load_config_text(self) -> str:
        if not self.config_path.exists():
            raise CheckpointFormatError(f"missing run configuration {self.config_path}")
        return self.config_path.read_text(encoding="utf-8")
