# dataset.py
"""Cohort -> vocabulary -> bucket matrices -> ICD-graphs, plus graph file I/O."""
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Union
import csv
import hashlib
import json
import logging

from gradibd.bucketizer import DEFAULT_TAU, BucketMatrix, bucketize
from gradibd.cohort import LOOKBACK_DAYS, CohortRecord
from gradibd.errors import ConfigError, OutputPathError, ParseError
from gradibd.icd_codec import CodeVocab, build_vocab
from gradibd.icd_graph import GraphStats, IcdGraph, build_graph, graph_stats

logger = logging.getLogger(__name__)

VOCAB_SCOPES = ("train", "all")


class EncodedPatient(NamedTuple):
    """One patient's graph, ready for the model."""
    patient_id: str
    label: int
    graph: IcdGraph
    empty: bool

    def to_dict(self) -> Dict[str, Any]:
        return {"patient_id": self.patient_id, "label": self.label,
                "empty": self.empty, "graph": self.graph.to_dict()}


def build_cohort_vocab(records: Iterable[CohortRecord]) -> CodeVocab:
    """Vocabulary over every code of the given records."""
    return build_vocab(code for record in records for code in record.iter_codes())


def vocab_for_split(train: Sequence[CohortRecord], everything: Sequence[CohortRecord],
                    scope: str = "train") -> CodeVocab:
    """Training-only vocabulary by default; ``scope='all'`` also reads held-out records."""
    if scope not in VOCAB_SCOPES:
        raise ConfigError(f"vocab_scope must be one of {VOCAB_SCOPES}, got {scope!r}")
    vocab = build_cohort_vocab(train if scope == "train" else everything)
    logger.info(f"Built {scope} vocabulary: {len(vocab.codes)} codes + UNK")
    return vocab


def encode_record(record: CohortRecord, vocab: CodeVocab, tau: int = DEFAULT_TAU,
                  window_days: int = LOOKBACK_DAYS) -> EncodedPatient:
    matrix = bucketize(record, vocab, tau, window_days)
    graph = build_graph(matrix)
    return EncodedPatient(record.patient_id, record.label, graph, graph.n_nodes == 0)


def encode_cohort(records: Sequence[CohortRecord], vocab: CodeVocab, tau: int = DEFAULT_TAU,
                  window_days: int = LOOKBACK_DAYS) -> List[EncodedPatient]:
    """Encode every record. Patients left without diagnoses keep an empty graph."""
    encoded = [encode_record(r, vocab, tau, window_days) for r in records]
    n_empty = sum(p.empty for p in encoded)
    if n_empty:
        logger.warning(f"{n_empty} of {len(encoded)} patients have no diagnoses in their window; "
                       f"they are kept with an empty graph")
    return encoded


def encode_matrices(records: Sequence[CohortRecord], vocab: CodeVocab, tau: int = DEFAULT_TAU,
                    window_days: int = LOOKBACK_DAYS) -> List[BucketMatrix]:
    return [bucketize(r, vocab, tau, window_days) for r in records]


def cohort_fingerprint(records: Iterable[CohortRecord]) -> str:
    """SHA-256 of the canonical JSONL rendering of the records."""
    digest = hashlib.sha256()
    for record in records:
        digest.update(json.dumps(record.to_dict(), separators=(",", ":"), sort_keys=True).encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


class GraphStore:
    """Reads and writes encoded patients as one JSON object per line."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def save(self, patients: Iterable[EncodedPatient]) -> int:
        self.path.parent.mkdir(exist_ok=True, parents=True)
        count = 0
        with open(self.path, "w", encoding="utf-8", newline="\n") as f:
            for patient in patients:
                f.write(json.dumps(patient.to_dict(), separators=(",", ":")) + "\n")
                count += 1
        logger.info(f"Wrote {count} graphs to {self.path}")
        return count

    def load(self) -> List[EncodedPatient]:
        patients = []
        with open(self.path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    graph = IcdGraph.from_dict(obj["graph"])
                    patients.append(EncodedPatient(str(obj["patient_id"]), int(obj["label"]),
                                                   graph, bool(obj["empty"])))
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise ParseError(f"malformed graph record: {e}", line_no=line_no) from None
                except ParseError as e:
                    raise ParseError(str(e), line_no=line_no) from None
        return patients


def write_stats_csv(path: Union[str, Path], patients: Sequence[EncodedPatient],
                    stats: Optional[Sequence[GraphStats]] = None) -> None:
    """One row per patient with its graph size statistics."""
    stats = stats if stats is not None else [graph_stats(p.graph) for p in patients]
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["patient_id", "label", "empty", *GraphStats._fields])
        for patient, s in zip(patients, stats):
            writer.writerow([patient.patient_id, patient.label, int(patient.empty), *s])


MATRIX_FIELDS = ("code_id", "bucket_index", "frequency")


def write_matrix_dir(directory: Union[str, Path], patient_ids: Sequence[str],
                     matrices: Sequence[BucketMatrix]) -> List[Path]:
    """Dump each bucket matrix to ``<directory>/<patient_id>.csv``, one row per nonzero entry.

    Rows are ordered by bucket, then code id.

    Raises:
        OutputPathError: If a patient id cannot be used as a file name.
    """
    directory = Path(directory)
    directory.mkdir(exist_ok=True, parents=True)
    paths = []
    for patient_id, matrix in zip(patient_ids, matrices):
        if patient_id in ("", ".", "..") or Path(patient_id).name != patient_id:
            raise OutputPathError(f"patient id {patient_id!r} is not usable as a file name")
        path = directory / f"{patient_id}.csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(MATRIX_FIELDS)
            for (code_id, bucket), freq in sorted(matrix.entries.items(), key=lambda e: (e[0][1], e[0][0])):
                writer.writerow([code_id, bucket, freq])
        paths.append(path)
    logger.info(f"Wrote {len(paths)} bucket matrices to {directory}")
    return paths
