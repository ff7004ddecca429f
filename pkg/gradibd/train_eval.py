# train_eval.py
"""Stratified k-fold training, fold-ensemble evaluation, ablations and lead-time sweeps.

Every fold draws its shuffling and initialization from ``SeedSequence([seed, fold])``
so folds can train in any order, in any process, with identical results.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple
import json
import logging
import math

import numpy as np
from sklearn.model_selection import LeaveOneOut, StratifiedKFold

from gradibd import diff_core as dc
from gradibd.checkpoints import ScoreRow, read_scores
from gradibd.cohort import LOOKBACK_DAYS, CohortRecord, apply_prediction_interval, stratified_split
from gradibd.dataset import VOCAB_SCOPES, EncodedPatient, cohort_fingerprint, encode_cohort, vocab_for_split
from gradibd.errors import ConfigError, EmptyTestSet, NonFiniteLoss, ParseError, TooFewRecords
from gradibd.icd_codec import CodeVocab
from gradibd.metrics import CI_FORMULA, DECISION_THRESHOLD, MetricSummary, all_metrics, t_interval
from gradibd.model import Ablation, ModelConfig, ModelParams, loss, predict_proba

logger = logging.getLogger(__name__)

METRICS = ("auroc", "ap", "f1")


@dataclass(frozen=True)
class TrainConfig:
    folds: int = 10
    lr: float = 1e-3
    lr_decay_factor: float = 10.0
    patience_lr: int = 3
    patience_stop: int = 10
    max_epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    min_delta: float = 1e-5

    def validate(self) -> "TrainConfig":
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience_lr < 1 or self.patience_stop < self.patience_lr:
            raise ConfigError(f"need 1 <= patience_lr <= patience_stop, got "
                              f"{self.patience_lr} and {self.patience_stop}")
        if not self.lr > 0 or not self.lr_decay_factor > 1:
            raise ConfigError("lr must be > 0 and lr_decay_factor > 1")
        if self.min_delta < 0:
            raise ConfigError("min_delta must be >= 0")
        return self

    def stopping_rule(self) -> str:
        return (f"stagnant = val loss not improved by >= {self.min_delta:g}; lr / {self.lr_decay_factor:g} "
                f"after {self.patience_lr} stagnant epochs; stop after {self.patience_stop} stagnant epochs "
                f"or {self.max_epochs} epochs; best-val-loss parameters kept")


@dataclass(frozen=True)
class ExperimentSettings:
    """How a cohort becomes graphs and how it is split."""
    tau: int = 7
    window_days: int = LOOKBACK_DAYS
    lead_days: int = 30
    test_fraction: float = 0.1
    vocab_scope: str = "train"
    seed: int = 0

    def validate(self) -> "ExperimentSettings":
        if self.tau < 1 or self.window_days < self.tau:
            raise ConfigError(f"need 1 <= tau <= window_days, got tau={self.tau}, window_days={self.window_days}")
        if self.lead_days < 0:
            raise ConfigError(f"lead_days must be >= 0, got {self.lead_days}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.vocab_scope not in VOCAB_SCOPES:
            raise ConfigError(f"vocab_scope must be one of {VOCAB_SCOPES}, got {self.vocab_scope!r}")
        return self


class EpochRecord(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FoldResult:
    fold: int
    arrays: Dict[str, np.ndarray]
    trace: List[EpochRecord]
    best_epoch: int
    best_val_loss: float
    val_scores: List[ScoreRow]
    stopped_early: bool = False
    adam: Optional[dc.AdamState] = None


class FoldMetrics(NamedTuple):
    fold: int
    auroc: float
    ap: float
    f1: float
    threshold: float


@dataclass
class EvalReport:
    folds: List[FoldMetrics]
    aggregate: Dict[str, MetricSummary]
    run_fingerprint: str = ""
    cohort_fingerprint: str = ""
    n_test: int = 0
    ci_formula: str = CI_FORMULA
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "folds": [f._asdict() for f in self.folds],
            "aggregate": {name: s._asdict() for name, s in self.aggregate.items()},
            "run_fingerprint": self.run_fingerprint,
            "cohort_fingerprint": self.cohort_fingerprint,
            "n_test": self.n_test,
            "ci_formula": self.ci_formula,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        try:
            return cls(
                folds=[FoldMetrics(**f) for f in data["folds"]],
                aggregate={name: MetricSummary(**s) for name, s in data["aggregate"].items()},
                run_fingerprint=data["run_fingerprint"],
                cohort_fingerprint=data["cohort_fingerprint"],
                n_test=data["n_test"],
                ci_formula=data["ci_formula"],
                notes=list(data["notes"]),
            )
        except (KeyError, TypeError) as e:
            raise ParseError(f"malformed report: {e}") from None


# === Folds ===

def stratified_kfold(labels: Sequence[int], k: int, seed: int,
                     allow_sparse_classes: bool = False) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Partition record indices into k (train, val) pairs with the global case fraction.

    Uses a shuffled ``StratifiedKFold``, so fold sizes differ by at most one
    and every validation fold holds both classes. With
    ``allow_sparse_classes`` and ``k`` equal to the number of records, a class
    smaller than ``k`` is accepted and the folds become leave-one-out.

    Raises:
        TooFewRecords: If there are fewer records than folds, a class is
            missing, or a class has fewer members than folds.
    """
    labels = np.asarray(labels, dtype=int)
    n = labels.size
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    n_cases = int(np.count_nonzero(labels == 1))
    n_controls = n - n_cases
    if n < k or n_cases == 0 or n_controls == 0:
        raise TooFewRecords(f"cannot make {k} folds from {n_cases} cases and {n_controls} controls")
    if min(n_cases, n_controls) < k:
        if not (allow_sparse_classes and k == n):
            raise TooFewRecords(f"a class has {min(n_cases, n_controls)} members, fewer than the {k} folds")
        logger.warning(f"A class has fewer members than the {k} folds; using leave-one-out folds")
        return [(train, val) for train, val in LeaveOneOut().split(labels)]

    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return [(train, val) for train, val in splitter.split(np.zeros((n, 1)), labels)]


# === Training ===

def batch_gradients(batch: Sequence[EncodedPatient], params: ModelParams,
                    config: ModelConfig) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean BCE over the batch and its gradient, summed over members in order."""
    total = 0.0
    grads = {name: np.zeros_like(t.data) for name, t in params.named_parameters()}
    for patient in batch:
        params.zero_grad()
        value = loss(patient.graph, patient.label, params, config)
        dc.backward(value)
        total += value.item()
        for name, g in params.gradients().items():
            grads[name] += g
    scale = 1.0 / len(batch)
    return total * scale, {name: g * scale for name, g in grads.items()}


def mean_loss(patients: Sequence[EncodedPatient], params: ModelParams, config: ModelConfig) -> float:
    return float(np.mean([loss(p.graph, p.label, params, config).item() for p in patients]))


def score_patients(patients: Sequence[EncodedPatient], params: ModelParams,
                   config: ModelConfig) -> List[ScoreRow]:
    return [ScoreRow(p.patient_id, p.label, predict_proba(p.graph, params, config)) for p in patients]


def fold_rng(seed: int, fold: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, fold]))


def train_fold(train: Sequence[EncodedPatient], val: Sequence[EncodedPatient], n_codes: int,
               model_config: ModelConfig, train_config: TrainConfig, fold: int = 0) -> FoldResult:
    """Adam with plateau learning-rate drops and early stopping.

    The result keeps the best-val-loss parameters together with the Adam state
    as it stood after that epoch, so training can resume from the checkpoint.

    Raises:
        NonFiniteLoss: With the running batch id of the first NaN/inf batch loss.
    """
    if not train or not val:
        raise TooFewRecords(f"fold {fold}: training and validation sets must be non-empty")
    rng = fold_rng(train_config.seed, fold)
    params = ModelParams.initialize(model_config, n_codes, rng)
    state = dc.AdamState(lr=train_config.lr)

    best_loss, best_arrays, best_epoch = math.inf, params.arrays(), 0
    best_adam = state.copy()
    stagnant = since_drop = 0
    trace: List[EpochRecord] = []
    batch_id = 0
    stopped_early = False
    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(len(train))
        batch_losses = []
        for start in range(0, len(train), train_config.batch_size):
            members = [train[i] for i in order[start:start + train_config.batch_size]]
            value, grads = batch_gradients(members, params, model_config)
            if not math.isfinite(value):
                raise NonFiniteLoss(batch_id, value)
            updated, state = dc.adam_step({n: t.data for n, t in params.named_parameters()}, grads, state)
            for name, array in updated.items():
                params[name].data = array
            batch_losses.append(value)
            batch_id += 1

        val_loss = mean_loss(val, params, model_config)
        train_loss = float(np.mean(batch_losses))
        trace.append(EpochRecord(epoch, train_loss, val_loss, state.lr))
        logger.info(f"fold {fold} epoch {epoch}: train {train_loss:.5f} val {val_loss:.5f} lr {state.lr:g}")

        if val_loss < best_loss - train_config.min_delta:
            best_loss, best_arrays, best_epoch = val_loss, params.arrays(), epoch
            best_adam = state.copy()
            stagnant = since_drop = 0
            continue
        stagnant += 1
        since_drop += 1
        if stagnant >= train_config.patience_stop:
            logger.info(f"fold {fold}: early stop after epoch {epoch} (best epoch {best_epoch})")
            stopped_early = True
            break
        if since_drop >= train_config.patience_lr:
            state.lr = state.lr / train_config.lr_decay_factor
            since_drop = 0
            logger.info(f"fold {fold}: learning rate reduced to {state.lr:g}")

    best = ModelParams.from_arrays(best_arrays, model_config, n_codes)
    return FoldResult(fold, best_arrays, trace, best_epoch, best_loss,
                      score_patients(val, best, model_config), stopped_early, best_adam)


def _train_fold_job(args: Tuple) -> FoldResult:
    return train_fold(*args)


def cross_validate(patients: Sequence[EncodedPatient], n_codes: int, model_config: ModelConfig,
                   train_config: TrainConfig, jobs: int = 1) -> List[FoldResult]:
    """Train one model per fold; results come back in fold order whatever ``jobs`` is."""
    train_config.validate()
    model_config.validate()
    splits = stratified_kfold([p.label for p in patients], train_config.folds, train_config.seed)
    jobs_args = [([patients[i] for i in tr], [patients[i] for i in va], n_codes, model_config, train_config, f)
                 for f, (tr, va) in enumerate(splits)]
    logger.info(f"Cross-validating {len(patients)} patients in {len(splits)} folds "
                f"({model_config.ablation.label}, jobs={jobs})")
    logger.info(f"Stopping rule: {train_config.stopping_rule()}")
    if jobs <= 1:
        return [_train_fold_job(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=min(jobs, len(jobs_args))) as pool:
        return list(pool.map(_train_fold_job, jobs_args))


# === Reports ===

def report_from_fold_scores(labels: Sequence[int], fold_scores: Sequence[Sequence[float]],
                            threshold: float = DECISION_THRESHOLD, **extra: Any) -> EvalReport:
    """Per-fold metrics and their mean and t-interval."""
    if len(labels) == 0:
        raise EmptyTestSet("the test set is empty")
    folds = [FoldMetrics(f, **all_metrics(scores, labels, threshold)) for f, scores in enumerate(fold_scores)]
    aggregate = {m: t_interval([getattr(f, m) for f in folds]) for m in METRICS}
    return EvalReport(folds, aggregate, n_test=len(labels), **extra)


def report_from_score_files(paths: Sequence[str], threshold: float = DECISION_THRESHOLD,
                            **extra: Any) -> EvalReport:
    """Rebuild a report from per-fold score CSVs, given in fold order."""
    per_fold = [read_scores(p) for p in paths]
    if not per_fold:
        raise EmptyTestSet("no score files given")
    reference = [(r.patient_id, r.label) for r in per_fold[0]]
    for path, rows in zip(paths, per_fold):
        if [(r.patient_id, r.label) for r in rows] != reference:
            raise ParseError(f"{path}: patients or labels differ from the first score file")
    return report_from_fold_scores([label for _, label in reference],
                                   [[r.score for r in rows] for rows in per_fold], threshold, **extra)


def evaluate_ensemble(fold_params: Sequence[Dict[str, np.ndarray]], test: Sequence[EncodedPatient],
                      model_config: ModelConfig, n_codes: int,
                      **extra: Any) -> Tuple[EvalReport, List[List[ScoreRow]]]:
    """Score the test set with every fold model independently and summarize across folds.

    A single model is allowed; its interval then has zero width.
    """
    if not test:
        raise EmptyTestSet("the test set is empty")
    if not fold_params:
        raise ConfigError("need at least one fold model")
    fold_rows = [score_patients(test, ModelParams.from_arrays(a, model_config, n_codes), model_config)
                 for a in fold_params]
    report = report_from_fold_scores([p.label for p in test], [[r.score for r in rows] for rows in fold_rows],
                                     **extra)
    return report, fold_rows


def cv_report(results: Sequence[FoldResult], **extra: Any) -> EvalReport:
    """Summary of out-of-fold validation metrics, one value per fold."""
    folds = [FoldMetrics(r.fold, **all_metrics([s.score for s in r.val_scores],
                                               [s.label for s in r.val_scores]))
             for r in results]
    aggregate = {m: t_interval([getattr(f, m) for f in folds]) for m in METRICS}
    return EvalReport(folds, aggregate, n_test=sum(len(r.val_scores) for r in results), **extra)


def pooled_oof_metrics(results: Sequence[FoldResult]) -> Dict[str, float]:
    """Metrics on all out-of-fold predictions pooled together."""
    rows = [s for r in results for s in r.val_scores]
    return all_metrics([s.score for s in rows], [s.label for s in rows])


# === Experiments ===

@dataclass
class ExperimentResult:
    settings: ExperimentSettings
    vocab: CodeVocab
    train_records: List[CohortRecord]
    test_records: List[CohortRecord]
    test_patients: List[EncodedPatient]
    fold_results: List[FoldResult]
    report: EvalReport
    test_scores: List[List[ScoreRow]]


def prepare_split(records: Sequence[CohortRecord], settings: ExperimentSettings, vocab: Optional[CodeVocab] = None
                  ) -> Tuple[List[CohortRecord], List[CohortRecord], CodeVocab]:
    """Apply the lead time, hold out the test split and build the vocabulary.

    A given ``vocab`` is used as is; codes outside it encode to UNK.
    """
    settings.validate()
    truncated = [apply_prediction_interval(r, settings.lead_days) for r in records]
    train, test = stratified_split(truncated, settings.test_fraction, settings.seed)
    if vocab is None:
        vocab = vocab_for_split(train, truncated, settings.vocab_scope)
    return train, test, vocab


def experiment_notes(train_config: TrainConfig, settings: ExperimentSettings) -> List[str]:
    return [
        f"stopping rule (our default): {train_config.stopping_rule()}",
        f"lead_days={settings.lead_days} tau={settings.tau} window_days={settings.window_days} "
        f"vocab_scope={settings.vocab_scope}",
        "patients without diagnoses in their window are kept with an empty graph",
    ]


def run_experiment(records: Sequence[CohortRecord], model_config: ModelConfig, train_config: TrainConfig,
                   settings: ExperimentSettings, jobs: int = 1, run_fingerprint: str = "",
                   vocab: Optional[CodeVocab] = None) -> ExperimentResult:
    """Lead-time truncation, hold-out split, k-fold training and fold-ensemble test evaluation."""
    train, test, vocab = prepare_split(records, settings, vocab)
    train_patients = encode_cohort(train, vocab, settings.tau, settings.window_days)
    test_patients = encode_cohort(test, vocab, settings.tau, settings.window_days)
    results = cross_validate(train_patients, vocab.n, model_config, train_config, jobs)
    report, test_scores = evaluate_ensemble(
        [r.arrays for r in results], test_patients, model_config, vocab.n,
        run_fingerprint=run_fingerprint, cohort_fingerprint=cohort_fingerprint(records),
        notes=experiment_notes(train_config, settings))
    summary = ", ".join(f"{m} {s.mean:.4f}" for m, s in report.aggregate.items())
    logger.info(f"Test set ({len(test_patients)} patients): {summary}")
    return ExperimentResult(settings, vocab, train, test, test_patients, results, report, test_scores)


class AblationRow(NamedTuple):
    configuration: str
    ablation: Ablation
    report: EvalReport


def run_ablation(records: Sequence[CohortRecord], model_config: ModelConfig, train_config: TrainConfig,
                 settings: ExperimentSettings, grid: Sequence[Ablation], jobs: int = 1,
                 vocab: Optional[CodeVocab] = None) -> List[AblationRow]:
    """Cross-validate each ablation on the same training split; metrics are out-of-fold."""
    train, _, vocab = prepare_split(records, settings, vocab)
    patients = encode_cohort(train, vocab, settings.tau, settings.window_days)
    fingerprint = cohort_fingerprint(records)
    rows = []
    for ablation in grid:
        config = replace(model_config, ablation=ablation)
        results = cross_validate(patients, vocab.n, config, train_config, jobs)
        report = cv_report(results, cohort_fingerprint=fingerprint, notes=experiment_notes(train_config, settings))
        logger.info(f"Ablation {ablation.label}: AUROC {report.aggregate['auroc'].mean:.4f}")
        rows.append(AblationRow(ablation.label, ablation, report))
    return rows


class SweepRow(NamedTuple):
    configuration: str
    lead_days: int
    metric: str
    mean: float
    ci_lo: float
    ci_hi: float


def sensitivity_sweep(records: Sequence[CohortRecord], leads: Sequence[int], model_config: ModelConfig,
                      train_config: TrainConfig, settings: ExperimentSettings, jobs: int = 1,
                      ablations: Optional[Sequence[Ablation]] = None, vocab: Optional[CodeVocab] = None
                      ) -> Tuple[List[SweepRow], Dict[Tuple[str, int], EvalReport]]:
    """Run the full experiment once per (configuration, lead time).

    ``ablations`` defaults to the configured model alone. Passing the full and
    the Uniform configuration shows how the gap between weighted and mean
    aggregation moves with the lead time. Rows come configuration by
    configuration, then lead by lead, then metric by metric.
    """
    if not leads:
        raise ConfigError("the sweep needs at least one lead time")
    grid = list(ablations) if ablations else [model_config.ablation]
    labels = [a.label for a in grid]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"sweep configurations repeat: {labels}")
    rows: List[SweepRow] = []
    reports: Dict[Tuple[str, int], EvalReport] = {}
    for ablation in grid:
        config = replace(model_config, ablation=ablation)
        for lead in leads:
            logger.info(f"Sweep: {ablation.label} at lead time {lead} days")
            result = run_experiment(records, config, train_config, replace(settings, lead_days=int(lead)), jobs,
                                    vocab=vocab)
            reports[(ablation.label, int(lead))] = result.report
            rows.extend(SweepRow(ablation.label, int(lead), m, *result.report.aggregate[m]) for m in METRICS)
    return rows, reports
