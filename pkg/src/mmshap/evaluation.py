"""Metrics and the experiment protocol: AUC, thresholded scores, splits, CV plans."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic.

    Tied scores share their mid-rank, so a tied positive/negative pair counts
    one half.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_recall_f1(preds, labels) -> tuple[float, float, float]:
    """Return ``(precision, recall, f1)`` for binary predictions.

    Precision is 0 when nothing is predicted positive; recall is 0 when there
    are no positives; F1 is 0 when precision + recall is 0.
    """
    preds = np.asarray(preds).astype(int)
    labels = np.asarray(labels).astype(int)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def classification_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    precision, recall, f1 = precision_recall_f1(np.asarray(scores) >= threshold, labels)
    return {"auc": roc_auc(scores, labels), "recall": recall, "precision": precision, "f1": f1}


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.50
    val: float = 0.25
    test: float = 0.25
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of ``n`` items; ties go to the earlier slot.

    Every slot with a positive fraction receives at least one item when ``n``
    allows it.
    """
    raw = [n * f for f in fractions]
    counts = [math.floor(r + 1e-9) for r in raw]
    rest = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
            if counts[donor] > 1:
                counts[donor] -= 1
                counts[i] += 1
    return counts


def stratified_split(labels, spec: SplitSpec = SplitSpec()):
    """Split case indices into ``(train, val, test)`` index arrays.

    Each class is shuffled with the seed and divided proportionally, so every
    subset keeps roughly the global class balance.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(spec.seed)
    fractions = (spec.train, spec.val, spec.test)
    parts = [[], [], []]
    groups = [np.flatnonzero(labels == c) for c in (0, 1)] if spec.stratified else [np.arange(len(labels))]
    for members in groups:
        if spec.stratified and len(members) < 4:
            raise ValueError(f"class too small to split: {len(members)} cases")
        members = rng.permutation(members)
        counts = _allocate(len(members), fractions)
        bounds = np.cumsum([0] + counts)
        for j in range(3):
            parts[j].append(members[bounds[j]:bounds[j + 1]])
    return tuple(np.sort(np.concatenate(p)).astype(int) for p in parts)


@dataclass(frozen=True)
class Fold:
    repeat: int
    fold: int
    train: np.ndarray
    val: np.ndarray


def repeated_cv(labels, n_repeats: int = 5, k: int = 5, seed: int = 0) -> list[Fold]:
    """Repeated stratified k-fold plan: ``n_repeats * k`` (train, val) pairs.

    Within a repeat each class is shuffled and dealt round-robin to the folds,
    so every case is validated exactly once per repeat.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if k < 2 or n < k:
        raise ValueError(f"need at least k={k} cases (and k >= 2), got {n}")
    seeds = np.random.SeedSequence(seed).spawn(n_repeats)
    plan = []
    for r in range(n_repeats):
        rng = np.random.default_rng(seeds[r])
        fold_of = np.empty(n, dtype=int)
        offset = 0
        for c in (0, 1):
            members = rng.permutation(np.flatnonzero(labels == c))
            fold_of[members] = (np.arange(len(members)) + offset) % k
            # continue the deal where the previous class stopped to balance sizes
            offset = (offset + len(members)) % k
        for f in range(k):
            plan.append(Fold(r, f, np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)))
    return plan


# ---------------------------------------------------------------------------
# Run summaries
# ---------------------------------------------------------------------------


@dataclass
class RunSummary:
    mean: dict[str, float]
    sd: dict[str, float]
    n_runs: int

    @classmethod
    def from_runs(cls, runs: Sequence[dict[str, float]]) -> "RunSummary":
        if not runs:
            raise ValueError("need at least one run")
        keys = list(runs[0])
        arr = {key: np.array([r[key] for r in runs], dtype=float) for key in keys}
        # sample sd over runs; a single run has sd 0
        sd = {key: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for key, v in arr.items()}
        return cls({key: float(np.mean(v)) for key, v in arr.items()}, sd, len(runs))


METRIC_COLUMNS = ("auc", "recall", "precision", "f1")


def write_results_table(path, summaries: dict[str, RunSummary]) -> None:
    """Write one row per model with mean and sd of every metric."""
    header = ["model", "n_runs"]
    for m in METRIC_COLUMNS:
        header += [f"{m}_mean", f"{m}_sd"]
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for name, s in summaries.items():
            row = [name, s.n_runs]
            for m in METRIC_COLUMNS:
                row += [f"{s.mean[m]:.6f}", f"{s.sd[m]:.6f}"]
            writer.writerow(row)


def read_results_table(path) -> dict[str, dict[str, float]]:
    with open(Path(path), newline="") as fh:
        return {
            row["model"]: {k: float(v) for k, v in row.items() if k != "model"}
            for row in csv.DictReader(fh)
        }
