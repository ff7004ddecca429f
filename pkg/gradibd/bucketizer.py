# bucketizer.py
"""Visit bucketization: irregular visits -> sparse code x bucket frequency matrix."""
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Tuple
import math

import numpy as np

from gradibd.cohort import LOOKBACK_DAYS, CohortRecord
from gradibd.errors import ConfigError
from gradibd.icd_codec import CodeVocab

DEFAULT_TAU = 7


@dataclass(frozen=True)
class BucketMatrix:
    """Sparse X in R^{N x T}; only positive frequencies are stored.

    ``entries`` is ordered by (bucket, code_id).
    """
    n_codes: int
    n_buckets: int
    tau: int
    window_start: int
    entries: Mapping[Tuple[int, int], int]
    nonempty_buckets: Tuple[int, ...]

    def bucket_entries(self, bucket: int) -> List[Tuple[int, int]]:
        """(code_id, frequency) pairs of one bucket, by code_id."""
        return sorted((c, f) for (c, b), f in self.entries.items() if b == bucket)

    def iter_buckets(self) -> Iterator[Tuple[int, List[Tuple[int, int]]]]:
        grouped: Dict[int, List[Tuple[int, int]]] = {b: [] for b in self.nonempty_buckets}
        for (code_id, bucket), freq in self.entries.items():
            grouped[bucket].append((code_id, freq))
        for bucket in self.nonempty_buckets:
            yield bucket, sorted(grouped[bucket])

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_codes, self.n_buckets), dtype=np.int64)
        for (code_id, bucket), freq in self.entries.items():
            dense[code_id, bucket] = freq
        return dense

    def column_sums(self) -> np.ndarray:
        sums = np.zeros(self.n_buckets, dtype=np.int64)
        for (_, bucket), freq in self.entries.items():
            sums[bucket] += freq
        return sums

    def total(self) -> int:
        return sum(self.entries.values())


def bucketize(record: CohortRecord, vocab: CodeVocab, tau: int = DEFAULT_TAU,
              window_days: int = LOOKBACK_DAYS) -> BucketMatrix:
    """Count code occurrences per ``tau``-day bucket of the observation window.

    The window ends at the record's cutoff (``anchor_day - lead_days``) and
    starts ``window_days`` earlier, clipped at day 0. Buckets are aligned to the
    window start; an occurrence on the last window day lands in bucket T-1.
    """
    if tau < 1:
        raise ConfigError(f"tau must be >= 1, got {tau}")
    if window_days < tau:
        raise ConfigError(f"window_days ({window_days}) must be >= tau ({tau})")
    n_buckets = math.ceil(window_days / tau)
    window_start = max(0, record.cutoff_day - window_days)

    counts: Dict[Tuple[int, int], int] = {}
    for visit in record.visits:
        if visit.day_offset < window_start or visit.day_offset > record.cutoff_day:
            continue
        bucket = min((visit.day_offset - window_start) // tau, n_buckets - 1)
        for raw in visit.codes:
            key = (vocab.encode(raw), bucket)
            counts[key] = counts.get(key, 0) + 1

    entries = {key: counts[key] for key in sorted(counts, key=lambda k: (k[1], k[0]))}
    nonempty = tuple(sorted({bucket for _, bucket in entries}))
    return BucketMatrix(vocab.n, n_buckets, tau, window_start, entries, nonempty)


def nnz(matrix: BucketMatrix) -> int:
    """Number of (code, bucket) pairs with positive frequency, i.e. graph node count."""
    return len(matrix.entries)
