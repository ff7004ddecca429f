from pathlib import Path
from typing import List
import sys

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from gradibd.cohort import CohortRecord, SynthConfig, Visit, generate_synthetic  # noqa: E402
from gradibd.icd_codec import build_vocab  # noqa: E402
from gradibd.model import ModelConfig  # noqa: E402
from gradibd.train_eval import ExperimentSettings, TrainConfig  # noqa: E402


def make_record(patient_id: str = "p1", label: int = 0, anchor_day: int = 400, visits=()) -> CohortRecord:
    """Record from ``[(day, [codes...]), ...]``."""
    return CohortRecord(patient_id, label, anchor_day, tuple(Visit(d, tuple(c)) for d, c in visits))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_record() -> CohortRecord:
    return make_record("p1", 1, 100, [(10, ["K50.1", "E11"]), (12, ["K50.9"]), (40, ["I10"]), (95, ["K51.0"])])


@pytest.fixture
def small_vocab():
    return build_vocab(["K50", "E11", "I10", "K51"])


@pytest.fixture
def tiny_model() -> ModelConfig:
    return ModelConfig(d_node=4, d_graph=6, depth=2, lam=0.3, d_hidden=4)


@pytest.fixture
def fast_train() -> TrainConfig:
    return TrainConfig(folds=2, lr=0.05, max_epochs=3, patience_lr=2, patience_stop=3, batch_size=4, seed=0)


@pytest.fixture
def short_window() -> ExperimentSettings:
    return ExperimentSettings(tau=30, window_days=1095, lead_days=30, test_fraction=0.2, seed=0)


@pytest.fixture(scope="session")
def small_cohort() -> List[CohortRecord]:
    return generate_synthetic(SynthConfig(n_patients=40, case_fraction=0.5, background_vocab_size=20,
                                          visit_rate=0.3, seed=3))
