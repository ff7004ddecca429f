"""End-to-end behaviour on the frozen synthetic cohorts. Every test here trains many models."""
from dataclasses import replace
import os

import numpy as np
import pytest

from config import SWEEP_LEADS
from gradibd.cohort import SynthConfig, generate_synthetic
from gradibd.model import ABLATION_GRID, ModelConfig
from gradibd.train_eval import (ExperimentSettings, TrainConfig, pooled_oof_metrics, run_ablation, run_experiment,
                                sensitivity_sweep)

pytestmark = pytest.mark.slow

JOBS = os.cpu_count() or 1
MODEL = ModelConfig(d_node=16, d_graph=16, depth=2, d_hidden=16)
TRAIN = TrainConfig(folds=5, lr=0.01, max_epochs=30, patience_lr=3, patience_stop=6, batch_size=16)
SEED_TRAIN = replace(TRAIN, folds=3, max_epochs=15)
SETTINGS = ExperimentSettings(tau=30, lead_days=30, test_fraction=0.2)
SEEDS = range(5)


@pytest.fixture(scope="module")
def strong_cohort():
    config = SynthConfig()
    assert (config.n_patients, config.case_fraction, config.seed) == (2000, 0.2, 7)
    return generate_synthetic(config)


def test_strong_signal_reaches_target_test_auroc(strong_cohort):
    result = run_experiment(strong_cohort, MODEL, TRAIN, SETTINGS, jobs=JOBS)
    assert result.report.n_test == 400
    assert result.report.aggregate["auroc"].mean >= 0.85


def test_null_signal_stays_at_chance():
    config = SynthConfig(motif_ramp=0.0)
    assert config.null_signal
    result = run_experiment(generate_synthetic(config), MODEL, TRAIN, SETTINGS, jobs=JOBS)
    # pooled out-of-fold scores: 1600 patients against 400 in the test split
    assert 0.45 <= pooled_oof_metrics(result.fold_results)["auroc"] <= 0.55


def test_full_weighting_keeps_up_with_uniform_over_seeds(strong_cohort):
    table = {a.label: [] for a in ABLATION_GRID}
    for seed in SEEDS:
        rows = run_ablation(strong_cohort, MODEL, replace(SEED_TRAIN, seed=seed), replace(SETTINGS, seed=seed),
                            ABLATION_GRID, jobs=JOBS)
        assert [r.configuration for r in rows] == list(table)
        for row in rows:
            table[row.configuration].append(row.report.aggregate["auroc"].mean)
    means = {label: float(np.mean(values)) for label, values in table.items()}
    assert means["CS+CF+TD"] >= means["Uniform"] - 0.01


def test_auroc_does_not_rise_with_lead_time():
    records = generate_synthetic(SynthConfig(n_patients=1000))
    per_lead = {lead: [] for lead in SWEEP_LEADS}
    for seed in SEEDS:
        rows, _ = sensitivity_sweep(records, SWEEP_LEADS, MODEL, replace(SEED_TRAIN, seed=seed),
                                    replace(SETTINGS, seed=seed), jobs=JOBS)
        for row in rows:
            if row.metric == "auroc":
                per_lead[row.lead_days].append(row.mean)
    means = [float(np.mean(per_lead[lead])) for lead in SWEEP_LEADS]
    assert all(later <= earlier + 0.03 for earlier, later in zip(means, means[1:]))
