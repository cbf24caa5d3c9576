"""Synthetic multimodal cohorts with planted, known feature importance.

Labels follow a linear-logit model: each modality contributes a standardized
score scaled by its signal weight, and an intercept is calibrated by bisection
so the cohort hits the requested prevalence. The vitals score is built from
the same summary statistics the fusion model's vitals encoder sees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mmshap.preprocess import (
    MEDICATION_GROUPS,
    STEP_SECONDS,
    VITAL_CHANNELS,
    VitalsSeries,
    vitals_summary,
    znorm,
)
from mmshap.records import PatientRecord

MODALITIES = ("static", "hip", "chest", "vitals", "med")
# share of cases receiving each medication group, in registry order
MEDICATION_RATES = (
    0.402, 0.428, 0.123, 0.275, 0.290, 0.347, 0.251, 0.116, 0.294,
    0.549, 0.175, 0.276, 0.401, 0.161, 0.462, 0.069, 0.288,
)
N_HIGH_MISSING_STATIC = 10
START_EPOCH = 1_577_836_800.0  # 2020-01-01T00:00:00Z


def default_missing_rates(n_static: int = 76) -> dict:
    static = np.full(n_static, 0.02)
    # a handful of sparsely recorded columns, heaviest first
    static[-N_HIGH_MISSING_STATIC:] = np.linspace(0.666, 0.11, N_HIGH_MISSING_STATIC)
    return {"static": static.tolist(), "vitals": 0.02, "vitals_burst": 0.3, "med": 0.032}


@dataclass
class GeneratorConfig:
    n_patients: int = 1669
    prevalence_target: float = 0.078
    modality_signal_weights: tuple = (2.5, 0.5, 0.5, 0.5, 0.5)
    n_static: int = 76
    n_embed: int = 32
    n_med: int = 17
    n_informative_static: int = 12
    missing_rates: dict = field(default_factory=default_missing_rates)
    vitals_length: tuple = (120, 1337)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.prevalence_target < 1:
            raise ValueError(f"prevalence must lie in (0, 1), got {self.prevalence_target}")
        w = np.asarray(self.modality_signal_weights, dtype=float)
        if w.shape != (len(MODALITIES),) or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("need five finite non-negative modality signal weights")
        if self.n_med != len(MEDICATION_GROUPS):
            raise ValueError(f"n_med must be {len(MEDICATION_GROUPS)}")
        lo, hi = self.vitals_length
        if not 2 <= lo <= hi:
            raise ValueError("vitals_length must satisfy 2 <= min <= max")
        if self.n_patients < 2:
            raise ValueError("need at least two patients")
        if not 0 <= self.n_informative_static <= self.n_static:
            raise ValueError("n_informative_static out of range")


@dataclass
class GroundTruth:
    """Planted coefficients per modality and each modality's share of signal variance."""

    coefficients: dict[str, list[float]]
    signal_share: dict[str, float]
    intercept: float
    prevalence: float

    def to_dict(self) -> dict:
        return {
            "coefficients": self.coefficients,
            "signal_share": self.signal_share,
            "intercept": self.intercept,
            "prevalence": self.prevalence,
        }


def _static_loading(rng, n_static: int, n_latent: int = 6) -> np.ndarray:
    """Factor loadings that make the static columns correlated (helps KNN imputation)."""
    return rng.normal(0, 1, (n_latent, n_static)) / np.sqrt(n_latent)


def _vitals_clean(rng, length: int) -> np.ndarray:
    """Smooth random-walk vitals, shape ``(length, 6)`` in channel order."""
    pos = np.linspace(0.0, 1.0, length)

    def walk(level, scale, trend):
        steps = rng.normal(0.0, scale, length)
        width = min(8, length)
        smooth = np.convolve(np.cumsum(steps), np.ones(width) / width, mode="same")
        return level + smooth + trend * pos

    hr = walk(rng.normal(75, 10), 0.6, rng.normal(0, 12))
    pulse = hr + rng.normal(0, 0.5, length)
    spo2 = np.minimum(walk(rng.normal(96, 1.5), 0.15, rng.normal(0, 2)), 100.0)
    dia = walk(rng.normal(65, 8), 0.5, rng.normal(0, 10))
    sys_ = walk(rng.normal(125, 12), 0.8, rng.normal(0, 15))
    mean = (sys_ + 2 * dia) / 3 + rng.normal(0, 0.5, length)
    return np.column_stack([hr, pulse, spo2, dia, sys_, mean])


def _calibrate(score: np.ndarray, u: np.ndarray, target: float) -> float:
    """Intercept whose realized positive count is closest to ``target * n``."""
    want = int(round(target * len(score)))

    def count(b):
        return int(np.sum(u < 1.0 / (1.0 + np.exp(-(b + score)))))

    lo, hi = -60.0, 60.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if count(mid) < want:
            lo = mid
        else:
            hi = mid
    best = min((lo, hi), key=lambda b: abs(count(b) - want))
    return best


def generate_cohort(config: GeneratorConfig) -> tuple[list[PatientRecord], GroundTruth]:
    """Draw a fully observed cohort and the coefficients that generated its labels."""
    n = config.n_patients
    want = config.prevalence_target * n
    if round(want) < 1 or round(want) > n - 1:
        raise ValueError(f"prevalence {config.prevalence_target} unachievable with {n} patients")
    root = np.random.SeedSequence(config.seed)
    global_seed, label_seed, patient_root = root.spawn(3)
    g = np.random.default_rng(global_seed)

    loading = _static_loading(g, config.n_static)
    n_binary = config.n_static // 3
    informative = np.sort(g.choice(config.n_static, config.n_informative_static, replace=False))
    beta = {
        "static": np.zeros(config.n_static),
        "hip": g.normal(0, 1, config.n_embed),
        "chest": g.normal(0, 1, config.n_embed),
        "vitals": np.zeros(len(VITAL_CHANNELS) * 6),
        "med": g.normal(0, 1, config.n_med),
    }
    beta["static"][informative] = g.choice([-1.0, 1.0], len(informative)) * g.uniform(0.5, 1.5, len(informative))
    # per-patient z-normalization flattens mean and sd, so only shape statistics carry signal
    vit = beta["vitals"].reshape(len(VITAL_CHANNELS), 6)
    vit[:, 2:] = g.normal(0, 1, (len(VITAL_CHANNELS), 4))

    lo, hi = config.vitals_length
    records = []
    raw_scores = {m: np.zeros(n) for m in MODALITIES}
    patient_seeds = patient_root.spawn(n)
    for i in range(n):
        rng = np.random.default_rng(patient_seeds[i])
        latent = rng.normal(0, 1, loading.shape[0])
        static = latent @ loading + rng.normal(0, 0.6, config.n_static)
        static[-n_binary:] = (static[-n_binary:] > 0).astype(float)
        hip = rng.normal(0, 1, config.n_embed)
        chest = rng.normal(0, 1, config.n_embed)
        length = int(rng.integers(lo, hi + 1))
        clean = _vitals_clean(rng, length)
        start = START_EPOCH + i * 86_400.0
        times = start + np.arange(length) * STEP_SECONDS + rng.uniform(-3.0, 3.0, length)
        vitals = {c: (times.copy(), clean[:, j].copy()) for j, c in enumerate(VITAL_CHANNELS)}
        given = rng.random(config.n_med) < np.asarray(MEDICATION_RATES)
        meds = [MEDICATION_GROUPS[j] for j in np.flatnonzero(given)]

        grid = VitalsSeries(start, STEP_SECONDS, {c: clean[:, j] for j, c in enumerate(VITAL_CHANNELS)})
        summary = vitals_summary(znorm(grid))
        raw_scores["static"][i] = static @ beta["static"]
        raw_scores["hip"][i] = hip @ beta["hip"]
        raw_scores["chest"][i] = chest @ beta["chest"]
        raw_scores["vitals"][i] = summary @ beta["vitals"]
        raw_scores["med"][i] = given.astype(float) @ beta["med"]
        records.append(PatientRecord(f"P{i:05d}", static, hip, chest, vitals, meds, 0))

    weights = np.asarray(config.modality_signal_weights, dtype=float)
    score = np.zeros(n)
    coefficients = {}
    for m, w in zip(MODALITIES, weights):
        sd = raw_scores[m].std()
        scale = w / sd if sd > 0 else 0.0
        score += scale * (raw_scores[m] - raw_scores[m].mean())
        coefficients[m] = (scale * beta[m]).tolist()
    u = np.random.default_rng(label_seed).random(n)
    intercept = _calibrate(score, u, config.prevalence_target)
    labels = (u < 1.0 / (1.0 + np.exp(-(intercept + score)))).astype(int)
    prevalence = float(labels.mean())
    if abs(prevalence - config.prevalence_target) > 0.01 and n >= 100:
        raise ValueError(
            f"prevalence {config.prevalence_target} unachievable: calibrated cohort reached {prevalence:.4f}"
        )
    for rec, y in zip(records, labels):
        rec.label = int(y)

    total = float(np.sum(weights**2))
    if total > 0:
        share = {m: float(w**2 / total) for m, w in zip(MODALITIES, weights)}
    else:
        share = {m: 1.0 / len(MODALITIES) for m in MODALITIES}
    return records, GroundTruth(coefficients, share, float(intercept), prevalence)


def inject_missingness(records: list[PatientRecord], rates: dict, seed: int = 0) -> list[PatientRecord]:
    """Return copies of ``records`` with values removed completely at random.

    ``rates`` keys: ``static`` (one rate, or one per column), ``vitals``
    (per-sample drop probability, per channel), ``vitals_burst`` (probability
    that a patient loses one stretch of 25-60 consecutive samples on every
    channel) and ``med`` (probability the medication record is absent).
    """
    for key, r in rates.items():
        r = np.asarray(r, dtype=float)
        if np.any(r < 0) or np.any(r >= 1):
            raise ValueError(f"missingness rate for {key!r} must be in [0, 1)")
    seeds = np.random.SeedSequence(seed).spawn(len(records))
    out = []
    static_rate = np.asarray(rates.get("static", 0.0), dtype=float)
    vit_rate = float(rates.get("vitals", 0.0))
    burst_rate = float(rates.get("vitals_burst", 0.0))
    med_rate = float(rates.get("med", 0.0))
    for rec, s in zip(records, seeds):
        rng = np.random.default_rng(s)
        static = rec.static.copy()
        drop = rng.random(static.shape) < static_rate
        static[drop] = np.nan
        vitals = {}
        length = len(next(iter(rec.vitals.values()))[0])
        keep_all = np.ones(length, dtype=bool)
        if rng.random() < burst_rate and length > 80:
            width = int(rng.integers(25, 61))
            begin = int(rng.integers(10, length - width - 10))
            keep_all[begin:begin + width] = False
        for name, (times, values) in rec.vitals.items():
            keep = keep_all & (rng.random(len(times)) >= vit_rate)
            vitals[name] = (times[keep], values[keep])
        meds = rec.medications
        if rng.random() < med_rate:
            meds = None
        out.append(PatientRecord(rec.patient_id, static, rec.hip.copy(), rec.chest.copy(), vitals,
                                 None if meds is None else list(meds), rec.label))
    return out
