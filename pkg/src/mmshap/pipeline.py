"""Cohort-level glue: preprocessing a cohort into model inputs and running experiments."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mmshap.attribution import BackgroundSet, ExplainConfig, explain_cohort
from mmshap.evaluation import SplitSpec, classification_metrics, repeated_cv, stratified_split
from mmshap.fusion import (
    INPUT_DIMS,
    MODALITY_ORDER,
    ModalityPartition,
    MultimodalModel,
    build_encoders,
    build_model,
    pretrain_encoder,
    staged_train,
)
from mmshap.io import read_json, read_labels, read_matrix, write_json, write_labels, write_matrix
from mmshap.nn import TrainConfig, class_weights_from_labels
from mmshap.preprocess import (
    MEDICATION_GROUPS,
    VITAL_CHANNELS,
    VITALS_SUMMARY_STATS,
    PreprocessingError,
    StaticTable,
    encode_medication,
    knn_impute,
    preprocess_vitals,
    vitals_summary,
)
from mmshap.records import PatientRecord

INPUT_PARTITION = ModalityPartition(MODALITY_ORDER, INPUT_DIMS)
UNIMODAL_NAMES = {"static": "Pre-Static", "hip": "Pre-Hip", "chest": "Pre-Chest", "vitals": "Per-Vitals"}
# learning rates of the unimodal models, as tuned for the original encoders
UNIMODAL_LR = {"static": 1e-3, "hip": 1e-5, "chest": 1e-5, "vitals": 5e-4}
FUSION_VARIANTS = {
    "Pre": ("static", "hip", "chest"),
    "Per": ("vitals", "med"),
    "All": MODALITY_ORDER,
}
VITALS_FEATURE_NAMES = [f"{c}_{s}" for c in VITAL_CHANNELS for s in VITALS_SUMMARY_STATS]


@dataclass
class ProcessedCohort:
    """Model-ready inputs, one row per retained patient."""

    ids: list[str]
    inputs: np.ndarray
    labels: np.ndarray
    static_columns: list[str]
    manifest: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)

    def modality(self, name: str) -> np.ndarray:
        return self.inputs[:, INPUT_PARTITION.slice(name)]

    def feature_names(self) -> list[str]:
        names = list(self.static_columns)
        names += [f"hip_e{i}" for i in range(INPUT_DIMS[1])]
        names += [f"chest_e{i}" for i in range(INPUT_DIMS[2])]
        names += VITALS_FEATURE_NAMES
        return names + list(MEDICATION_GROUPS)


def preprocess_cohort(records: list[PatientRecord], static_columns=None, knn_k: int = 10,
                      keep_series: bool = False) -> ProcessedCohort:
    """Clean vitals, impute static features and encode medication for every patient.

    Patients whose vitals are unusable after cleaning are excluded and listed
    in the manifest.
    """
    kept, summaries, excluded, dropped, warned, series = [], [], [], {}, 0, {}
    for rec in records:
        try:
            s, frac = preprocess_vitals(rec.vitals)
            summaries.append(vitals_summary(s))
        except PreprocessingError as exc:
            excluded.append({"patient_id": rec.patient_id, "reason": str(exc)})
            continue
        kept.append(rec)
        dropped[rec.patient_id] = float(frac)
        warned += bool(s.warnings)
        if keep_series:
            series[rec.patient_id] = s
    if not kept:
        raise PreprocessingError("no patients left after vitals preprocessing")
    ids = [r.patient_id for r in kept]
    cols = list(static_columns) if static_columns is not None else [f"static_{i}" for i in range(len(kept[0].static))]
    table, n_imputed = knn_impute(StaticTable(np.array([r.static for r in kept]), cols, ids), knn_k)
    meds = np.array([encode_medication(r.medications) for r in kept])
    inputs = np.hstack([table.values, np.array([r.hip for r in kept]), np.array([r.chest for r in kept]),
                        np.array(summaries), meds])
    fracs = np.array(list(dropped.values()))
    manifest = {
        "n_input": len(records),
        "n_kept": len(kept),
        "excluded": excluded,
        "static_cells_imputed": n_imputed,
        "knn_k": knn_k,
        "missing_medication_records": int(sum(r.medications is None for r in kept)),
        "vitals_dropped_fraction": {"mean": float(fracs.mean()), "max": float(fracs.max()), "per_patient": dropped},
        "vitals_warnings": warned,
    }
    return ProcessedCohort(ids, inputs, np.array([r.label for r in kept], dtype=int), cols, manifest, series)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    max_epochs: int = 100
    patience: int = 10
    lr_halving_patience: int = 5
    batch_size: int = 32
    dropout: float = 0.3
    l2_weight: float = 1e-3
    stage1_lr: float = 5e-2
    stage2_lr: float = 5e-3
    leaky_slope: float = 0.01
    unimodal_lr: dict = field(default_factory=lambda: dict(UNIMODAL_LR))
    variants: tuple = ("Pre", "Per", "All")
    threshold: float = 0.5

    def train_config(self, learning_rate: float, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate, self.max_epochs, self.patience, self.lr_halving_patience,
                           self.batch_size, self.dropout, self.l2_weight, seed, self.leaky_slope)


@dataclass
class RunResult:
    metrics: dict[str, dict[str, float]]
    val_auc: dict[str, float]
    models: dict[str, MultimodalModel]
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray


def _columns(names) -> np.ndarray:
    return np.concatenate([np.arange(INPUT_PARTITION.total)[INPUT_PARTITION.slice(n)] for n in names])


def run_once(cohort: ProcessedCohort, train_idx, val_idx, test_idx, seed: int,
             config: ExperimentConfig = ExperimentConfig()) -> RunResult:
    """Pre-train unimodal encoders, fuse them per variant and score everything on the test rows."""
    X, y = cohort.inputs, cohort.labels
    weights = class_weights_from_labels(y[train_idx])
    seeds = np.random.SeedSequence(seed).generate_state(8)
    encoders = build_encoders(int(seeds[0]), config.leaky_slope)
    metrics, val_auc, models = {}, {}, {}
    for k, name in enumerate(("static", "hip", "chest", "vitals")):
        cols = _columns([name])
        cfg = config.train_config(config.unimodal_lr[name], int(seeds[1]) + k)
        enc, clf, hist = pretrain_encoder(
            encoders[name], (X[train_idx][:, cols], y[train_idx]), (X[val_idx][:, cols], y[val_idx]), cfg, weights
        )
        encoders[name] = enc
        metrics[UNIMODAL_NAMES[name]] = classification_metrics(
            clf.predict_proba(X[test_idx][:, cols]), y[test_idx], config.threshold
        )
        val_auc[UNIMODAL_NAMES[name]] = hist.best_auc
    for k, variant in enumerate(config.variants):
        names = FUSION_VARIANTS[variant]
        cols = _columns(names)
        model = build_model(encoders, names, int(seeds[2]) + k, config.leaky_slope)
        cfg = config.train_config(config.stage1_lr, int(seeds[3]) + k)
        fitted, (h1, h2) = staged_train(
            model, (X[train_idx][:, cols], y[train_idx]), (X[val_idx][:, cols], y[val_idx]),
            config.stage1_lr, config.stage2_lr, cfg, weights,
        )
        metrics[variant] = classification_metrics(fitted.predict_proba(X[test_idx][:, cols]), y[test_idx],
                                                  config.threshold)
        val_auc[variant] = h2.best_auc
        models[variant] = fitted
    return RunResult(metrics, val_auc, models, np.asarray(train_idx), np.asarray(val_idx), np.asarray(test_idx))


def run_split(cohort: ProcessedCohort, seed: int, config: ExperimentConfig = ExperimentConfig()) -> RunResult:
    """One stratified 50/25/25 split and one training run."""
    tr, va, te = stratified_split(cohort.labels, SplitSpec(seed=seed))
    return run_once(cohort, tr, va, te, seed, config)


def run_cv(cohort: ProcessedCohort, seed: int, n_repeats: int = 5, k: int = 5,
           config: ExperimentConfig = ExperimentConfig(), progress=None) -> list[RunResult]:
    """Hold out a stratified quarter for testing, then repeated stratified k-fold on the rest.

    Every run is scored on the same held-out test rows.
    """
    dev, _, test = stratified_split(cohort.labels, SplitSpec(0.75, 0.0, 0.25, seed=seed))
    plan = repeated_cv(cohort.labels[dev], n_repeats, k, seed)
    run_seeds = np.random.SeedSequence(seed).generate_state(len(plan))
    results = []
    for fold, s in zip(plan, run_seeds):
        results.append(run_once(cohort, dev[fold.train], dev[fold.val], test, int(s), config))
        if progress:
            progress(fold, results[-1])
    return results


def explain_test_set(cohort: ProcessedCohort, run: RunResult, variant: str = "All", n_samples: int = 32,
                     background: int = 32, seed: int = 0):
    """Global modality contributions of a trained model over its test rows."""
    model = run.models[variant]
    cols = _columns(FUSION_VARIANTS[variant])
    bg = BackgroundSet.from_rows(cohort.inputs[run.train_idx][:, cols], background, seed)
    cfg = ExplainConfig(method="sampled", n_samples=n_samples, seed=seed, propagate_modality=None)
    return explain_cohort(model, cohort.inputs[run.test_idx][:, cols], bg, cfg)


def save_processed(directory, cohort: ProcessedCohort) -> None:
    """Write model inputs, labels and the preprocessing manifest to ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "features.csv", cohort.ids, cohort.feature_names(), cohort.inputs)
    write_labels(d / "labels.csv", cohort.ids, cohort.labels)
    write_json(d / "manifest.json", cohort.manifest)


def load_processed(directory) -> ProcessedCohort:
    d = Path(directory)
    ids, columns, inputs = read_matrix(d / "features.csv")
    if inputs.shape[1] != INPUT_PARTITION.total:
        raise ValueError(f"{d / 'features.csv'} has {inputs.shape[1]} feature columns, expected {INPUT_PARTITION.total}")
    if np.isnan(inputs).any():
        raise ValueError(f"{d / 'features.csv'} still contains missing values")
    labels = read_labels(d / "labels.csv")
    missing = [i for i in ids if i not in labels]
    if missing:
        raise ValueError(f"no label for patient {missing[0]!r}")
    manifest = read_json(d / "manifest.json") if (d / "manifest.json").exists() else {}
    return ProcessedCohort(ids, inputs, np.array([labels[i] for i in ids], dtype=int),
                           columns[:INPUT_DIMS[0]], manifest)
