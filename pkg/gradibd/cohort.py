# cohort.py
"""Patient diagnosis trajectories: data model, JSONL storage, lead-time
truncation, stratified hold-out and a synthetic cohort generator."""
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union
import json
import logging
import math

import numpy as np
from sklearn.model_selection import train_test_split

from gradibd.errors import ConfigError, InvariantViolation, ParseError, TooFewRecords

logger = logging.getLogger(__name__)

LOOKBACK_DAYS = 1095
DAYS_PER_MONTH = 30
RECORD_KEYS = ("patient_id", "label", "anchor_day", "visits")
VISIT_KEYS = ("day_offset", "codes")


@dataclass(frozen=True)
class Visit:
    """One encounter: day offset from the observation-window start and its raw codes."""
    day_offset: int
    codes: Tuple[str, ...]

    def __post_init__(self) -> None:
        if self.day_offset < 0:
            raise InvariantViolation("day_offset", f"must be >= 0, got {self.day_offset}")
        if not self.codes:
            raise InvariantViolation("codes", f"visit on day {self.day_offset} has no codes")


@dataclass(frozen=True)
class CohortRecord:
    """One patient. ``lead_days`` and ``empty`` are set by lead-time truncation."""
    patient_id: str
    label: int
    anchor_day: int
    visits: Tuple[Visit, ...]
    lead_days: int = 0
    empty: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise InvariantViolation("label", f"must be 0 or 1, got {self.label!r}")
        if not 0 <= self.anchor_day <= LOOKBACK_DAYS:
            raise InvariantViolation("anchor_day", f"must lie in [0, {LOOKBACK_DAYS}], got {self.anchor_day}")
        previous = -1
        for visit in self.visits:
            if visit.day_offset >= self.anchor_day:
                raise InvariantViolation(
                    "visits", f"day_offset {visit.day_offset} is not before anchor_day {self.anchor_day}")
            if visit.day_offset < previous:
                raise InvariantViolation("visits", "visits are not sorted by day_offset")
            previous = visit.day_offset

    @property
    def cutoff_day(self) -> int:
        """Last day whose diagnoses may be used."""
        return self.anchor_day - self.lead_days

    def iter_codes(self) -> Iterable[str]:
        for visit in self.visits:
            yield from visit.codes

    def to_dict(self) -> Dict[str, Any]:
        return {
            "patient_id": self.patient_id,
            "label": self.label,
            "anchor_day": self.anchor_day,
            "visits": [{"day_offset": v.day_offset, "codes": list(v.codes)} for v in self.visits],
        }


def _record_from_dict(obj: Any, line_no: int) -> CohortRecord:
    if not isinstance(obj, dict):
        raise ParseError("record is not a JSON object", line_no=line_no)
    keys = set(obj)
    if keys != set(RECORD_KEYS):
        missing = sorted(set(RECORD_KEYS) - keys)
        extra = sorted(keys - set(RECORD_KEYS))
        raise ParseError(f"bad keys (missing={missing}, unexpected={extra})", line_no=line_no)
    if not isinstance(obj["patient_id"], str):
        raise InvariantViolation("patient_id", "must be a string", line_no=line_no)
    for name in ("label", "anchor_day"):
        if not isinstance(obj[name], int) or isinstance(obj[name], bool):
            raise InvariantViolation(name, "must be an integer", line_no=line_no)
    if not isinstance(obj["visits"], list):
        raise InvariantViolation("visits", "must be an array", line_no=line_no)

    visits = []
    for raw_visit in obj["visits"]:
        if not isinstance(raw_visit, dict) or set(raw_visit) != set(VISIT_KEYS):
            raise ParseError(f"visit must have exactly the keys {list(VISIT_KEYS)}", line_no=line_no)
        day, codes = raw_visit["day_offset"], raw_visit["codes"]
        if not isinstance(day, int) or isinstance(day, bool):
            raise InvariantViolation("day_offset", "must be an integer", line_no=line_no)
        if not isinstance(codes, list) or not all(isinstance(c, str) for c in codes):
            raise InvariantViolation("codes", "must be an array of strings", line_no=line_no)
        try:
            visits.append(Visit(day, tuple(codes)))
        except InvariantViolation as e:
            raise InvariantViolation(e.field, e.message, line_no=line_no) from None
    visits.sort(key=lambda v: v.day_offset)

    try:
        return CohortRecord(obj["patient_id"], obj["label"], obj["anchor_day"], tuple(visits))
    except InvariantViolation as e:
        raise InvariantViolation(e.field, e.message, line_no=line_no) from None


def load_cohort(path: Union[str, Path]) -> List[CohortRecord]:
    """Read a JSONL cohort file; blank lines are ignored.

    Raises:
        ParseError: On malformed JSON or wrong keys, with the line number.
        InvariantViolation: When a field breaks a record invariant.
    """
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", line_no=line_no) from None
            records.append(_record_from_dict(obj, line_no))
    logger.info(f"Loaded {len(records)} records from {path}")
    return records


def save_cohort(records: Iterable[CohortRecord], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), separators=(",", ":")) + "\n")


def apply_prediction_interval(record: CohortRecord, lead_days: int) -> CohortRecord:
    """Drop visits later than ``anchor_day - lead_days``; the anchor is unchanged.

    A record left without visits is kept and flagged ``empty``.
    """
    if lead_days < 0:
        raise ConfigError(f"lead_days must be >= 0, got {lead_days}")
    cutoff = record.anchor_day - lead_days
    kept = tuple(v for v in record.visits if v.day_offset <= cutoff)
    return replace(record, visits=kept, lead_days=lead_days, empty=not kept)


def months_to_days(months: int) -> int:
    return months * DAYS_PER_MONTH


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# === Synthetic cohorts ===

MAX_SYNTHETIC_CODES = 26 * 100


def synthetic_code(code_index: int) -> str:
    """Deterministic ICD-like string for a synthetic code index, e.g. 137 -> 'B37.7'."""
    if not 0 <= code_index < MAX_SYNTHETIC_CODES:
        raise ConfigError(f"synthetic code index {code_index} outside [0, {MAX_SYNTHETIC_CODES})")
    letter = chr(ord("A") + code_index // 100)
    return f"{letter}{code_index % 100:02d}.{code_index % 10}"


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings. Rates are per 30-day period.

    Every patient draws ``motif_codes`` at a base rate of ``motif_intensity``
    per period, so the codes alone do not give a case away. Only cases get the
    ramp: the rate grows by ``motif_ramp`` per period over the last
    ``ramp_periods`` periods before the anchor. With ``motif_in_controls`` off,
    controls draw no motif codes at all.
    """
    n_patients: int = 2000
    case_fraction: float = 0.2
    background_vocab_size: int = 300
    motif_codes: Tuple[int, ...] = (300, 301, 302, 303)
    motif_ramp: float = 0.1
    motif_intensity: float = 0.15
    visit_rate: float = 1.0
    codes_per_visit: float = 2.5
    ramp_periods: int = 12
    zipf_exponent: float = 1.1
    motif_in_controls: bool = True
    seed: int = 7

    def validate(self) -> None:
        if self.n_patients < 2:
            raise ConfigError(f"n_patients must be >= 2, got {self.n_patients}")
        if not 0.0 < self.case_fraction < 1.0:
            raise ConfigError(f"case_fraction must lie in (0, 1), got {self.case_fraction}")
        if self.background_vocab_size < 1:
            raise ConfigError("background_vocab_size must be >= 1")
        for name in ("visit_rate", "codes_per_visit", "zipf_exponent"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("motif_ramp", "motif_intensity"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.ramp_periods < 1:
            raise ConfigError("ramp_periods must be >= 1")
        if not self.motif_codes:
            raise ConfigError("motif_codes must not be empty")
        top = max(self.background_vocab_size - 1, *self.motif_codes)
        if min(self.motif_codes) < 0 or top >= MAX_SYNTHETIC_CODES:
            raise ConfigError(f"synthetic code ids must lie in [0, {MAX_SYNTHETIC_CODES})")

    @property
    def null_signal(self) -> bool:
        """True when labels leave no trace in the codes."""
        return self.motif_ramp == 0 and (self.motif_in_controls or self.motif_intensity == 0)


def _zipf_probabilities(size: int, exponent: float) -> np.ndarray:
    weights = 1.0 / np.arange(1, size + 1, dtype=np.float64) ** exponent
    return weights / weights.sum()


def _generate_patient(patient_id: str, label: int, config: SynthConfig,
                      zipf_p: np.ndarray, rng: np.random.Generator) -> CohortRecord:
    anchor_day = int(rng.integers(365, LOOKBACK_DAYS + 1))
    by_day: Dict[int, List[str]] = {}

    n_visits = int(rng.poisson(config.visit_rate * anchor_day / DAYS_PER_MONTH))
    for day in np.sort(rng.integers(0, anchor_day, size=n_visits)):
        n_codes = max(1, int(rng.poisson(config.codes_per_visit)))
        drawn = rng.choice(config.background_vocab_size, size=n_codes, p=zipf_p)
        by_day.setdefault(int(day), []).extend(synthetic_code(int(c)) for c in drawn)

    if label == 1 or config.motif_in_controls:
        n_periods = math.ceil(anchor_day / DAYS_PER_MONTH)
        for period in range(n_periods):
            rate = config.motif_intensity
            if label == 1:
                periods_to_anchor = n_periods - 1 - period
                rate += config.motif_ramp * max(0, config.ramp_periods - periods_to_anchor)
            if rate <= 0:
                continue
            start = period * DAYS_PER_MONTH
            stop = min(anchor_day, start + DAYS_PER_MONTH)
            for _ in range(int(rng.poisson(rate))):
                day = int(rng.integers(start, stop))
                code = config.motif_codes[int(rng.integers(len(config.motif_codes)))]
                by_day.setdefault(day, []).append(synthetic_code(code))

    visits = tuple(Visit(day, tuple(codes)) for day, codes in sorted(by_day.items()))
    return CohortRecord(patient_id, label, anchor_day, visits)


def generate_synthetic(config: SynthConfig) -> List[CohortRecord]:
    """Generate a deterministic case/control cohort.

    Exactly ``round(n_patients * case_fraction)`` patients are cases (clamped so
    both classes exist). Each patient draws from its own child of the master
    seed, so the result does not depend on generation order.
    """
    config.validate()
    n_cases = min(max(_round_half_up(config.n_patients * config.case_fraction), 1), config.n_patients - 1)
    master = np.random.SeedSequence(config.seed)
    label_rng, *patient_seeds = [np.random.default_rng(s) for s in master.spawn(config.n_patients + 1)]
    labels = np.zeros(config.n_patients, dtype=int)
    labels[label_rng.permutation(config.n_patients)[:n_cases]] = 1

    zipf_p = _zipf_probabilities(config.background_vocab_size, config.zipf_exponent)
    width = len(str(config.n_patients))
    records = [
        _generate_patient(f"p{i:0{width}d}", int(labels[i]), config, zipf_p, patient_seeds[i])
        for i in range(config.n_patients)
    ]
    logger.info(f"Generated {config.n_patients} synthetic patients ({n_cases} cases, "
                f"null_signal={config.null_signal}, seed={config.seed})")
    return records


# === Splits ===

def stratified_split(records: Sequence[CohortRecord], test_fraction: float,
                     seed: int) -> Tuple[List[CohortRecord], List[CohortRecord]]:
    """Hold out ``floor(n * test_fraction)`` records with the cohort's case fraction.

    The draw is ``train_test_split(stratify=labels)``; both outputs keep the
    input order.

    Raises:
        TooFewRecords: If a class would be missing from either side.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    labels = np.array([r.label for r in records], dtype=int)
    n = len(records)
    n_cases = int(np.count_nonzero(labels == 1))
    n_test = int(math.floor(n * test_fraction + 1e-9))
    too_few = TooFewRecords(f"cannot split {n_cases} cases / {n - n_cases} controls with "
                            f"test_fraction={test_fraction}: a stratum would be empty")
    if min(n_cases, n - n_cases) < 2 or not 2 <= n_test <= n - 2:
        raise too_few
    try:
        train_idx, test_idx = train_test_split(np.arange(n), test_size=n_test, random_state=seed, stratify=labels)
    except ValueError:
        raise too_few from None
    test_cases = int(labels[test_idx].sum())
    if not (0 < test_cases < n_test and 0 < n_cases - test_cases < n - n_test):
        raise too_few

    train = [records[i] for i in np.sort(train_idx)]
    test = [records[i] for i in np.sort(test_idx)]
    logger.info(f"Held out {len(test)} of {n} records ({test_cases} cases)")
    return train, test
