"""Shapley attributions for black-box functions and their propagation through encoders.

A function to explain takes a 2-D batch of input rows and returns either one
value per row or one vector per row. Absent features are filled in from a
background set (interventional value function), so the value of a coalition
``S`` is the background average of ``f`` at inputs that copy ``x`` on ``S``.

For a multimodal model the explanation is done in two steps: the fusion head
is explained in terms of the concatenated encoder outputs, which sum per
modality into absolute and relative contributions; then one modality's share
is pushed back through its encoder onto the raw inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mmshap.nn import MLPModel, _activate

EXACT_MAX_FEATURES = 20
BACKGROUND_CAP = 64
ZERO_TOL = 1e-12
_ROW_BUDGET = 1 << 17


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------


@dataclass
class BackgroundSet:
    """Reference rows used to stand in for absent features."""

    data: np.ndarray
    source: str = "training set"

    def __post_init__(self):
        self.data = np.array(self.data, dtype=float, ndmin=2)
        if self.data.shape[0] == 0:
            raise ValueError("background set is empty")

    @classmethod
    def from_rows(cls, rows, cap: int | None = BACKGROUND_CAP, seed=0, source: str = "training set"):
        """Subsample at most ``cap`` rows (seeded, kept in original order)."""
        rows = np.array(rows, dtype=float, ndmin=2)
        if cap is not None and len(rows) > cap:
            idx = np.sort(np.random.default_rng(seed).choice(len(rows), cap, replace=False))
            rows = rows[idx]
        return cls(rows, source)

    def __len__(self):
        return self.data.shape[0]

    @property
    def n_features(self) -> int:
        return self.data.shape[1]

    def columns(self, sl) -> "BackgroundSet":
        return BackgroundSet(self.data[:, sl], self.source)


@dataclass
class AttributionVector:
    """Shapley values for one explained input.

    ``values`` has one entry per feature, or shape ``(n_features, n_outputs)``
    when a vector-valued function was explained. ``base_value`` is the
    background-average output and ``prediction`` the output at ``x``.
    """

    values: np.ndarray
    base_value: float | np.ndarray
    prediction: float | np.ndarray
    method: str = "exact"
    n_samples: int | None = None
    seed: int | None = None

    def additivity_gap(self):
        return self.prediction - self.base_value - np.sum(self.values, axis=0)

    def __len__(self):
        return len(self.values)


@dataclass
class AttributionMatrix:
    """``values[i, j]``: contribution of input ``i`` to output component ``j``."""

    values: np.ndarray
    base_values: np.ndarray
    outputs: np.ndarray
    method: str = "exact"

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ModalityContribution:
    """Absolute (``ac``) and relative (``rc``) contribution per modality.

    For a single case ``ac`` holds signed sums. Global aggregates hold mean
    absolute values and carry standard deviations across cases.
    ``rc_defined`` is False when the total attribution is numerically zero,
    in which case ``rc`` is all NaN.
    """

    names: tuple[str, ...]
    ac: np.ndarray
    rc: np.ndarray
    rc_defined: bool = True
    ac_sd: np.ndarray | None = None
    rc_sd: np.ndarray | None = None
    n_cases: int = 1

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {n: {"ac": float(a), "rc": float(r)} for n, a, r in zip(self.names, self.ac, self.rc)}


# ---------------------------------------------------------------------------
# Value function and estimators
# ---------------------------------------------------------------------------


def _evaluate(f: Callable, X: np.ndarray) -> np.ndarray:
    out = np.asarray(f(X), dtype=float)
    if out.ndim == 2 and out.shape[1] == 1:
        out = out[:, 0]
    if out.shape[0] != X.shape[0]:
        raise ValueError("explained function must return one output per input row")
    return out


def _check(x, bg: BackgroundSet) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("explain one input vector at a time")
    if len(bg) == 0:
        raise ValueError("background set is empty")
    if bg.n_features != len(x):
        raise ValueError(f"background has {bg.n_features} columns, input has {len(x)}")
    return x


def value_function(f: Callable, x, S, bg: BackgroundSet):
    """Background-averaged output with features in ``S`` taken from ``x``.

    ``S`` is a collection of feature indices or a boolean mask.
    """
    x = _check(x, bg)
    S = np.asarray(S)
    mask = S.astype(bool) if S.dtype == bool else np.isin(np.arange(len(x)), S)
    comp = np.where(mask, x, bg.data)
    out = _evaluate(f, comp).mean(axis=0)
    return float(out) if np.ndim(out) == 0 else out


def _coalition_values(f, x, bg: BackgroundSet, masks: np.ndarray) -> np.ndarray:
    """Value of every coalition row in ``masks`` (shape ``(m, n)``)."""
    B = len(bg)
    per_chunk = max(1, _ROW_BUDGET // B)
    chunks = []
    for start in range(0, len(masks), per_chunk):
        m = masks[start:start + per_chunk]
        comp = np.where(m[:, None, :], x, bg.data[None, :, :]).reshape(-1, len(x))
        out = _evaluate(f, comp)
        chunks.append(out.reshape((len(m), B) + out.shape[1:]).mean(axis=1))
    return np.concatenate(chunks, axis=0)


def shapley_weights(n: int) -> np.ndarray:
    """``|S|! (n-|S|-1)! / n!`` for coalition sizes 0..n-1."""
    return np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])


def shapley_exact(f: Callable, x, bg: BackgroundSet, max_features: int = EXACT_MAX_FEATURES) -> AttributionVector:
    """Exact Shapley values by enumerating all ``2**n`` coalitions.

    Sums over coalitions use compensated summation, so the result does not
    depend on evaluation order.
    """
    x = _check(x, bg)
    n = len(x)
    if n > max_features:
        raise ValueError(
            f"{n} features exceed the exact-enumeration cap of {max_features}; use shapley_sampled"
        )
    codes = np.arange(1 << n)
    masks = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
    v = _coalition_values(f, x, bg, masks)
    prediction = _evaluate(f, x[None, :])[0]
    v[-1] = prediction
    sizes = masks.sum(axis=1)
    w = shapley_weights(n)
    vector = v.ndim == 2
    phi = np.zeros((n,) + v.shape[1:])
    for i in range(n):
        without = codes[(codes >> i) & 1 == 0]
        terms = w[sizes[without]].reshape((-1,) + (1,) * (v.ndim - 1)) * (v[without | (1 << i)] - v[without])
        if vector:
            phi[i] = [math.fsum(terms[:, j]) for j in range(v.shape[1])]
        else:
            phi[i] = math.fsum(terms)
    base = v[0]
    return AttributionVector(phi, _scalar(base), _scalar(prediction), "exact")


def _scalar(v):
    return float(v) if np.ndim(v) == 0 else np.asarray(v, dtype=float)


def _draw_permutations(rng, n: int, n_samples: int, antithetic: bool) -> np.ndarray:
    if not antithetic:
        return np.array([rng.permutation(n) for _ in range(n_samples)])
    perms = []
    while len(perms) < n_samples:
        p = rng.permutation(n)
        perms.append(p)
        if len(perms) < n_samples:
            perms.append(p[::-1])
    return np.array(perms)


def _prefix_values_generic(f, x, bg: BackgroundSet, perms: np.ndarray) -> np.ndarray:
    """``out[p, k]``: value of the first ``k`` features of permutation ``p``."""
    n = len(x)
    ranks = np.argsort(perms, axis=1)
    k = np.arange(1, n)
    # interior prefixes only; the empty and full coalitions are shared by all permutations
    masks = (ranks[:, None, :] < k[None, :, None]).reshape(-1, n)
    vals = _coalition_values(f, x, bg, masks)
    return vals.reshape((len(perms), n - 1) + vals.shape[1:])


def _prefix_values_mlp(model: MLPModel, x, bg: BackgroundSet, perms: np.ndarray) -> np.ndarray:
    """Same as the generic path for an MLP, updating first-layer pre-activations incrementally."""
    n = len(x)
    first = model.layers[0]
    rest = model.layers[1:]
    z0 = bg.data @ first.weights.T + first.bias  # (B, h)
    # effect of switching feature i from background to x: (B, n, h)
    delta = (x[None, :] - bg.data)[:, :, None] * first.weights.T[None, :, :]
    B = len(bg)
    per_chunk = max(1, _ROW_BUDGET // (B * max(n - 1, 1)))
    outs = []
    for start in range(0, len(perms), per_chunk):
        chunk = perms[start:start + per_chunk]
        # z[b, p, k]: pre-activation once the first k+1 features of permutation p come from x
        z = delta[:, chunk[:, :-1], :]
        np.cumsum(z, axis=2, out=z)
        z += z0[:, None, None, :]
        a = _activate(z, first.activation, model.leaky_slope)
        for layer in rest:
            a = _activate(a @ layer.weights.T + layer.bias, layer.activation, model.leaky_slope)
        vals = a.mean(axis=0)  # (P, n-1, d)
        if vals.shape[-1] == 1:
            vals = vals[..., 0]
        outs.append(vals)
    return np.concatenate(outs, axis=0)


def shapley_sampled(f: Callable, x, bg: BackgroundSet, n_samples: int = 256, seed=0,
                    antithetic: bool = True) -> AttributionVector:
    """Permutation-sampling Shapley estimate.

    Each sampled ordering adds features one at a time and credits every
    feature with the change in the background-averaged output. Orderings come
    in reversed pairs when ``antithetic``. Any residual against
    ``prediction - base_value`` is spread evenly over the features so the
    values add up exactly. Deterministic for a given ``seed``.
    """
    x = _check(x, bg)
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    n = len(x)
    rng = np.random.default_rng(seed)
    base = _evaluate(f, bg.data).mean(axis=0)
    prediction = _evaluate(f, x[None, :])[0]
    perms = _draw_permutations(rng, n, n_samples, antithetic)
    if n > 1:
        if isinstance(f, MLPModel):
            inner = _prefix_values_mlp(f, x, bg, perms)
        else:
            inner = _prefix_values_generic(f, x, bg, perms)
        tail = np.shape(base)
        vals = np.concatenate(
            [np.broadcast_to(base, (len(perms), 1) + tail), inner, np.broadcast_to(prediction, (len(perms), 1) + tail)],
            axis=1,
        )
    else:
        vals = np.stack([np.broadcast_to(base, (len(perms),) + np.shape(base)),
                         np.broadcast_to(prediction, (len(perms),) + np.shape(base))], axis=1)
    steps = np.diff(vals, axis=1)  # (P, n, ...) marginal contribution of perm[p, k]
    phi = np.zeros((n,) + np.shape(base))
    for p, perm in enumerate(perms):
        phi[perm] += steps[p]
    phi /= len(perms)
    residual = prediction - base - phi.sum(axis=0)
    phi = phi + residual / n
    return AttributionVector(phi, _scalar(base), _scalar(prediction), "sampled", int(n_samples), seed)


def shapley(f, x, bg: BackgroundSet, method: str = "auto", n_samples: int = 256, seed=0,
            max_exact: int = EXACT_MAX_FEATURES) -> AttributionVector:
    """Dispatch to exact enumeration when ``n <= max_exact`` (``auto``), else sampling."""
    if method == "auto":
        method = "exact" if len(x) <= max_exact else "sampled"
    if method == "exact":
        return shapley_exact(f, x, bg, max_exact)
    if method == "sampled":
        return shapley_sampled(f, x, bg, n_samples, seed)
    raise ValueError(f"unknown attribution method {method!r}")


# ---------------------------------------------------------------------------
# Modality aggregation
# ---------------------------------------------------------------------------


def modality_contribution(attr, partition) -> ModalityContribution:
    """Signed per-modality sums and their share of the total attribution."""
    values = np.asarray(attr.values if isinstance(attr, AttributionVector) else attr, dtype=float)
    if values.ndim != 1 or len(values) != partition.total:
        raise ValueError(f"need {partition.total} attributions, got shape {values.shape}")
    ac = np.array([math.fsum(values[partition.slice(n)]) for n in partition.names])
    total = math.fsum(values)
    if abs(total) < ZERO_TOL:
        return ModalityContribution(partition.names, ac, np.full(len(ac), np.nan), rc_defined=False)
    return ModalityContribution(partition.names, ac, ac / total)


def global_aggregate(per_case: Sequence[ModalityContribution]) -> ModalityContribution:
    """Mean absolute contribution per modality over cases, normalized to shares.

    ``rc_sd`` is the spread across cases of each case's share of absolute
    contribution.
    """
    if not per_case:
        raise ValueError("need at least one case to aggregate")
    names = per_case[0].names
    if any(c.names != names for c in per_case):
        raise ValueError("cases disagree on modality order")
    abs_ac = np.abs(np.array([c.ac for c in per_case]))
    mean_ac = abs_ac.mean(axis=0)
    total = mean_ac.sum()
    if total < ZERO_TOL:
        rc = np.full(len(names), np.nan)
        defined = False
    else:
        rc, defined = mean_ac / total, True
    row_tot = abs_ac.sum(axis=1, keepdims=True)
    shares = np.divide(abs_ac, row_tot, out=np.zeros_like(abs_ac), where=row_tot > ZERO_TOL)
    sd = lambda a: a.std(axis=0, ddof=1) if len(a) > 1 else np.zeros(a.shape[1])  # noqa: E731
    return ModalityContribution(names, mean_ac, rc, defined, sd(abs_ac), sd(shares), len(per_case))


def combine_runs(runs: Sequence[ModalityContribution]) -> ModalityContribution:
    """Average global contributions computed on separate training runs.

    Each run is first reduced to its own shares; the sd fields then describe
    variation between runs.
    """
    if not runs:
        raise ValueError("need at least one run")
    names = runs[0].names
    ac = np.array([r.ac for r in runs])
    rc = np.array([r.rc for r in runs])
    sd = lambda a: a.std(axis=0, ddof=1) if len(a) > 1 else np.zeros(a.shape[1])  # noqa: E731
    return ModalityContribution(names, ac.mean(axis=0), rc.mean(axis=0), bool(np.all(np.isfinite(rc))),
                                sd(ac), sd(rc), sum(r.n_cases for r in runs))


# ---------------------------------------------------------------------------
# Propagation through an encoder
# ---------------------------------------------------------------------------


def encoder_attribution_matrix(encoder: MLPModel, x, bg: BackgroundSet, method: str = "auto",
                               n_samples: int = 256, seed=0,
                               max_exact: int = EXACT_MAX_FEATURES) -> AttributionMatrix:
    """Shapley values of every encoder input for every encoder output component."""
    attr = shapley(encoder, x, bg, method, n_samples, seed, max_exact)
    values = np.asarray(attr.values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return AttributionMatrix(values, np.atleast_1d(attr.base_value), np.atleast_1d(attr.prediction), attr.method)


def propagate(phi_matrix, psi, mode: str) -> np.ndarray:
    """Push hidden-feature attributions ``psi`` back onto encoder inputs.

    ``paper`` mode: ``phi_x[i] = sum_j Phi[i, j] * psi[j] / sum(psi)``.

    ``conserving`` mode: ``phi_x[i] = sum_j Phi[i, j] / sum_i' Phi[i', j] * psi[j]``;
    a column whose sum is numerically zero hands its ``psi[j]`` out evenly.
    The result always sums to ``sum(psi)``.
    """
    Phi = np.asarray(phi_matrix.values if isinstance(phi_matrix, AttributionMatrix) else phi_matrix, dtype=float)
    psi = np.asarray(psi.values if isinstance(psi, AttributionVector) else psi, dtype=float)
    if Phi.ndim != 2 or psi.ndim != 1 or Phi.shape[1] != len(psi):
        raise ValueError(f"attribution matrix {Phi.shape} does not match {len(psi)} hidden attributions")
    if mode == "paper":
        ac = math.fsum(psi)
        if abs(ac) < ZERO_TOL:
            raise ValueError("modality contribution vanishes; paper-mode propagation is undefined")
        return Phi @ (psi / ac)
    if mode == "conserving":
        col = np.array([math.fsum(Phi[:, j]) for j in range(Phi.shape[1])])
        live = np.abs(col) >= ZERO_TOL
        out = Phi[:, live] @ (psi[live] / col[live])
        out += psi[~live].sum() / Phi.shape[0]
        return out
    raise ValueError(f"unknown propagation mode {mode!r}")


# ---------------------------------------------------------------------------
# Explaining a multimodal model
# ---------------------------------------------------------------------------


@dataclass
class ExplainConfig:
    mode: str = "conserving"
    method: str = "auto"
    n_samples: int = 256
    seed: int = 0
    max_exact: int = EXACT_MAX_FEATURES
    propagate_modality: str | None = "static"
    feature_names: Sequence[str] | None = None


@dataclass
class AttributionReport:
    """Local explanation of one case: modality level and, optionally, raw-feature level."""

    base_value: float
    prediction: float
    contributions: ModalityContribution
    hidden_values: np.ndarray
    propagated_modality: str | None = None
    feature_values: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)
    mode: str = "conserving"
    method: str = "sampled"
    seed: int | None = None
    n_samples: int | None = None
    case_id: str | None = None

    def to_dict(self) -> dict:
        mc = self.contributions
        doc = {
            "case_id": self.case_id,
            "base_value": float(self.base_value),
            "prediction": float(self.prediction),
            "modalities": [
                {"name": n, "ac": float(a), "rc": None if not mc.rc_defined else float(r)}
                for n, a, r in zip(mc.names, mc.ac, mc.rc)
            ],
            "propagated_modality": self.propagated_modality,
            "static_features": [
                {"name": n, "phi": float(v)} for n, v in zip(self.feature_names, self.feature_values)
            ] if self.feature_values is not None else [],
            "mode": self.mode,
            "method": self.method,
            "seed": self.seed,
            "n_samples": self.n_samples,
        }
        return doc

    def plot_data(self) -> dict:
        """Waterfall series: modality bars from the base value, then per-feature bars."""
        mc = self.contributions
        running = float(self.base_value)
        bars = []
        for n, a in zip(mc.names, mc.ac):
            bars.append({"label": n, "start": running, "end": running + float(a)})
            running += float(a)
        order = []
        if self.feature_values is not None:
            order = sorted(zip(self.feature_names, self.feature_values), key=lambda t: -abs(t[1]))
        return {
            "base_value": float(self.base_value),
            "prediction": float(self.prediction),
            "modality_waterfall": bars,
            "feature_bars": [{"label": n, "value": float(v)} for n, v in order],
        }


def _head_function(model) -> Callable:
    head = model.head

    def f(H):
        return head.forward(H)[:, 0]

    # keep the fast MLP path available: the head itself is an MLPModel
    return head if head.output_dim == 1 else f


def explain_case(model, x_raw, bg: BackgroundSet, config: ExplainConfig = ExplainConfig(),
                 case_id: str | None = None) -> AttributionReport:
    """Two-step explanation of one raw input row.

    Step 1 attributes the head's output to the concatenated encoder features
    (background: the encoded ``bg`` rows) and sums them per modality. Step 2
    attributes the chosen modality's encoder outputs to its raw inputs and
    propagates the step-1 values through them.
    """
    x_raw = np.asarray(x_raw, dtype=float)
    H = model.encode(x_raw)
    bg_H = BackgroundSet(model.encode(bg.data), bg.source)
    step1 = shapley(_head_function(model), H, bg_H, config.method, config.n_samples, config.seed, config.max_exact)
    contributions = modality_contribution(step1, model.partition)
    report = AttributionReport(
        base_value=float(step1.base_value),
        prediction=float(step1.prediction),
        contributions=contributions,
        hidden_values=np.asarray(step1.values),
        mode=config.mode,
        method=step1.method,
        seed=config.seed,
        n_samples=config.n_samples if step1.method == "sampled" else None,
        case_id=case_id,
    )
    m = config.propagate_modality
    if m is None:
        return report
    sl_raw = model.input_partition.slice(m)
    encoder = model.encoders[m]
    phi_matrix = encoder_attribution_matrix(
        encoder, x_raw[sl_raw], bg.columns(sl_raw), config.method, config.n_samples, config.seed, config.max_exact
    )
    psi = np.asarray(step1.values)[model.partition.slice(m)]
    try:
        feature_values = propagate(phi_matrix, psi, config.mode)
    except ValueError as exc:
        raise ValueError(f"case {case_id}: propagating {m!r} failed: {exc}") from exc
    names = list(config.feature_names) if config.feature_names is not None else [
        f"{m}_{i}" for i in range(encoder.input_dim)
    ]
    report.propagated_modality = m
    report.feature_values = feature_values
    report.feature_names = names
    return report


def explain_cohort(model, X_raw, bg: BackgroundSet, config: ExplainConfig = ExplainConfig(), case_ids=None):
    """Modality-level explanations for many cases plus their global aggregate.

    Each case gets its own seed derived from ``config.seed``.
    """
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
    seeds = np.random.SeedSequence(config.seed).generate_state(len(X_raw))
    bg_H = BackgroundSet(model.encode(bg.data), bg.source)
    f = _head_function(model)
    H_all = model.encode(X_raw)
    per_case = []
    for i, H in enumerate(H_all):
        attr = shapley(f, H, bg_H, config.method, config.n_samples, int(seeds[i]), config.max_exact)
        per_case.append(modality_contribution(attr, model.partition))
    return per_case, global_aggregate(per_case)
