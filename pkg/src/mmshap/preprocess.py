"""Per-patient vitals cleaning, static-table imputation and medication encoding.

Missing values are NaN throughout. The vitals pipeline runs in a fixed order:
resample -> interpolate_gaps -> cross_fill -> znorm -> drop_incomplete_steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

MISSING = float("nan")
STEP_SECONDS = 15.0
MAX_GAP = 20
VITAL_CHANNELS = ("heart_rate", "pulse", "spo2", "bp_dia", "bp_sys", "bp_mean")
N_STATIC = 76

MEDICATION_GROUPS = (
    "Bupivacaine",
    "Cefazolin",
    "Dexemethasone",
    "Efedrine",
    "Elektrolytes",
    "Esketamine",
    "Lidocaine",
    "Metamizole",
    "Midazolam",
    "Noradrenaline",
    "Ondansetron",
    "Piritramide",
    "Propofol",
    "Rocuronium",
    "Sufentanil",
    "Sugammadex",
    "Tranexamic acid",
)


class PreprocessingError(ValueError):
    """Input data cannot be processed as requested."""


# ---------------------------------------------------------------------------
# Vitals
# ---------------------------------------------------------------------------


@dataclass
class VitalsSeries:
    """Vital signs on a regular grid.

    ``steps`` holds the grid index of every stored element; it is
    ``arange(len)`` until :func:`drop_incomplete_steps` removes elements.
    """

    start_time: float
    step: float
    channels: dict[str, np.ndarray]
    steps: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        self.channels = {k: np.asarray(v, dtype=float) for k, v in self.channels.items()}
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise ValueError(f"channels have unequal lengths {sorted(lengths)}")
        if self.steps is None:
            self.steps = np.arange(len(self))
        self.steps = np.asarray(self.steps, dtype=int)
        if len(self.steps) != len(self):
            raise ValueError("steps must align with channel length")

    def __len__(self):
        return len(next(iter(self.channels.values()))) if self.channels else 0

    def times(self) -> np.ndarray:
        return self.start_time + self.steps * self.step

    def as_matrix(self, names=VITAL_CHANNELS) -> np.ndarray:
        """``(len, n_channels)`` array in ``names`` order."""
        return np.column_stack([self.channels[c] for c in names]) if len(self) else np.empty((0, len(names)))

    def n_missing(self) -> int:
        return int(sum(np.isnan(v).sum() for v in self.channels.values()))

    def _with(self, channels, **kw) -> "VitalsSeries":
        return replace(self, channels=channels, warnings=list(self.warnings), **kw)


def resample(raw: dict, step: float = STEP_SECONDS, channels=VITAL_CHANNELS) -> VitalsSeries:
    """Snap irregular samples onto a ``step``-second grid.

    ``raw`` maps channel name to ``(times, values)``. The grid runs from the
    first to the last observation over all channels. Grid point ``g`` owns the
    window ``(g - step/2, g + step/2]`` and takes the sample in that window
    nearest to ``g`` (earlier sample on an exact tie). Cells without a sample
    are NaN. Channels absent from ``raw`` come out all-NaN.
    """
    half = step / 2.0
    parsed = {}
    for name in channels:
        times, values = raw.get(name, ((), ()))
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if times.shape != values.shape:
            raise PreprocessingError(f"{name}: times and values differ in length")
        if np.any(np.diff(times) <= 0):
            raise PreprocessingError(f"{name}: timestamps must be strictly increasing")
        parsed[name] = (times, values)
    observed = [t for t, _ in parsed.values() if len(t)]
    if not observed:
        raise PreprocessingError("no vitals samples to resample")
    t0 = min(t[0] for t in observed)
    t_end = max(t[-1] for t in observed)
    n = int(np.ceil((t_end - t0 - half) / step)) + 1
    n = max(n, 1)
    out = {}
    for name, (times, values) in parsed.items():
        col = np.full(n, np.nan)
        if len(times):
            cell = np.ceil((times - t0 - half) / step).astype(int)
            dist = np.abs(times - (t0 + cell * step))
            # sort by cell, then distance, then time: first entry per cell wins
            order = np.lexsort((times, dist, cell))
            cell_sorted = cell[order]
            first = np.ones(len(order), dtype=bool)
            first[1:] = cell_sorted[1:] != cell_sorted[:-1]
            chosen = order[first]
            col[cell[chosen]] = values[chosen]
        out[name] = col
    return VitalsSeries(t0, step, out)


def _nan_runs(col: np.ndarray):
    """Yield ``(start, stop)`` of every maximal NaN run."""
    isnan = np.isnan(col)
    if not isnan.any():
        return
    edges = np.diff(np.concatenate(([0], isnan.view(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    yield from zip(starts, stops)


def interpolate_gaps(series: VitalsSeries, max_gap: int = MAX_GAP) -> VitalsSeries:
    """Linearly fill interior NaN runs of at most ``max_gap`` elements.

    Runs touching either end, or longer than ``max_gap``, are left alone.
    """
    out = {}
    for name, col in series.channels.items():
        col = col.copy()
        n = len(col)
        for start, stop in _nan_runs(col):
            if start == 0 or stop == n or stop - start > max_gap:
                continue
            left, right = col[start - 1], col[stop]
            frac = np.arange(1, stop - start + 1) / (stop - start + 1)
            col[start:stop] = left + frac * (right - left)
        out[name] = col
    return series._with(out)


def cross_fill(series: VitalsSeries, a: str = "heart_rate", b: str = "pulse") -> VitalsSeries:
    """Where exactly one of the paired channels is NaN, copy the other in."""
    if a not in series.channels or b not in series.channels:
        raise PreprocessingError(f"cross_fill needs both {a!r} and {b!r}")
    ca = series.channels[a].copy()
    cb = series.channels[b].copy()
    only_a_missing = np.isnan(ca) & ~np.isnan(cb)
    only_b_missing = np.isnan(cb) & ~np.isnan(ca)
    ca[only_a_missing] = cb[only_a_missing]
    cb[only_b_missing] = ca[only_b_missing]
    out = dict(series.channels)
    out[a], out[b] = ca, cb
    return series._with(out)


def znorm(series: VitalsSeries) -> VitalsSeries:
    """Standardize each channel over its observed entries (population sd).

    A channel with zero variance (or fewer than two observations) has its
    observed entries set to 0 and a warning recorded on the series.
    """
    out = {}
    notes = []
    for name, col in series.channels.items():
        obs = ~np.isnan(col)
        col = col.copy()
        if obs.sum() < 2:
            col[obs] = 0.0
            notes.append(f"{name}: fewer than two observed values")
        else:
            mean = math.fsum(col[obs]) / obs.sum()
            sd = float(np.sqrt(np.mean((col[obs] - mean) ** 2)))
            if sd == 0.0:
                col[obs] = 0.0
                notes.append(f"{name}: zero variance")
            else:
                col[obs] = (col[obs] - mean) / sd
        out[name] = col
    result = series._with(out)
    result.warnings.extend(notes)
    return result


def drop_incomplete_steps(series: VitalsSeries, channels=VITAL_CHANNELS) -> tuple[VitalsSeries, float]:
    """Remove every time step where any channel is NaN.

    Returns the reduced series and the fraction of steps dropped.
    """
    n = len(series)
    if n == 0:
        raise PreprocessingError("no usable vitals")
    complete = np.ones(n, dtype=bool)
    for name in channels:
        complete &= ~np.isnan(series.channels[name])
    if not complete.any():
        raise PreprocessingError("no usable vitals")
    out = {k: v[complete] for k, v in series.channels.items()}
    return series._with(out, steps=series.steps[complete]), 1.0 - complete.sum() / n


def preprocess_vitals(raw: dict, step: float = STEP_SECONDS, max_gap: int = MAX_GAP):
    """Run the full vitals pipeline; returns ``(series, fraction_dropped)``."""
    series = resample(raw, step)
    series = interpolate_gaps(series, max_gap)
    series = cross_fill(series)
    series = znorm(series)
    return drop_incomplete_steps(series)


VITALS_SUMMARY_STATS = ("mean", "sd", "min", "max", "last", "slope")


def vitals_summary(series: VitalsSeries, channels=VITAL_CHANNELS) -> np.ndarray:
    """Fixed-length vitals descriptor: mean, sd, min, max, last value and slope per channel.

    The slope is the least-squares trend against the grid position rescaled
    to [0, 1], so it does not depend on recording length. Output is ordered
    channel-major (six statistics for the first channel, then the next).
    """
    if len(series) == 0:
        raise PreprocessingError("no usable vitals")
    pos = series.steps.astype(float)
    span = pos[-1] - pos[0]
    pos = (pos - pos[0]) / span if span > 0 else np.zeros_like(pos)
    pc = pos - pos.mean()
    denom = float(np.sum(pc**2))
    feats = []
    for name in channels:
        col = series.channels[name]
        slope = float(np.sum(pc * (col - col.mean())) / denom) if denom > 0 else 0.0
        feats += [col.mean(), col.std(), col.min(), col.max(), col[-1], slope]
    return np.array(feats, dtype=float)


# ---------------------------------------------------------------------------
# Static table
# ---------------------------------------------------------------------------


@dataclass
class StaticTable:
    values: np.ndarray
    columns: list[str]
    row_ids: list[str] | None = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float, ndmin=2)
        if self.values.shape[1] != len(self.columns):
            raise ValueError(f"{self.values.shape[1]} columns of data but {len(self.columns)} names")
        if self.row_ids is None:
            self.row_ids = [str(i) for i in range(len(self.values))]
        if len(self.row_ids) != len(self.values):
            raise ValueError("row_ids must align with rows")

    @property
    def mask(self) -> np.ndarray:
        """True where a value is observed."""
        return ~np.isnan(self.values)


def _knn_fill(values: np.ndarray, observed: np.ndarray, donors_ok: np.ndarray, k: int) -> np.ndarray:
    """One imputation pass.

    ``values`` provides the distances (only ``observed`` cells count) and
    ``donors_ok`` says which cells may donate their value.
    """
    n, p = values.shape
    filled = values.copy()
    zeroed = np.where(observed, values, 0.0)
    for r in np.flatnonzero((~donors_ok).any(axis=1)):
        shared = observed & observed[r]
        n_shared = shared.sum(axis=1)
        diff = np.where(shared, zeroed - zeroed[r], 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.sqrt(np.sum(diff**2, axis=1) * (p / n_shared))
        dist[n_shared == 0] = np.inf
        dist[r] = np.inf
        for c in np.flatnonzero(~donors_ok[r]):
            cand = np.flatnonzero(donors_ok[:, c])
            cand = cand[cand != r]
            # stable sort: equal distances resolve by row order
            nearest = cand[np.argsort(dist[cand], kind="stable")[:k]]
            filled[r, c] = np.mean(values[nearest, c])
    return filled


def knn_impute(table: StaticTable, k: int = 10, n_iter: int = 1, tol: float = 1e-6) -> tuple[StaticTable, int]:
    """Fill missing cells with the mean of the ``k`` nearest donor rows.

    Distance between two rows is the Euclidean distance over the columns both
    observe, scaled by ``sqrt(n_columns / n_shared)``. Donors for a cell are
    the rows that observe that column. The first pass uses observed data only;
    with ``n_iter > 1`` later passes recompute distances on the filled table
    until the largest change falls below ``tol``.

    Returns the imputed table and the number of cells filled.
    """
    vals = table.values
    observed = ~np.isnan(vals)
    empty_rows = np.flatnonzero(~observed.any(axis=1))
    if len(empty_rows):
        raise PreprocessingError(
            "rows with no observed values: " + ", ".join(table.row_ids[i] for i in empty_rows)
        )
    short = [table.columns[c] for c in range(vals.shape[1]) if observed[:, c].sum() < min(k, 1)]
    if short:
        raise PreprocessingError("columns with no observed values: " + ", ".join(short))
    n_missing = int((~observed).sum())
    if n_missing == 0:
        return StaticTable(vals.copy(), list(table.columns), list(table.row_ids)), 0
    filled = _knn_fill(vals, observed, observed, k)
    all_obs = np.ones_like(observed)
    for _ in range(n_iter - 1):
        nxt = _knn_fill(np.where(observed, vals, filled), all_obs, observed, k)
        nxt[observed] = vals[observed]
        change = float(np.max(np.abs(nxt - filled)))
        filled = nxt
        if change < tol:
            break
    filled[observed] = vals[observed]
    return StaticTable(filled, list(table.columns), list(table.row_ids)), n_missing


# ---------------------------------------------------------------------------
# Medication
# ---------------------------------------------------------------------------


def encode_medication(raw, registry=MEDICATION_GROUPS) -> np.ndarray:
    """Binary indicator per medication group; ``None`` (no record) gives all zeros."""
    vec = np.zeros(len(registry))
    if raw is None:
        return vec
    index = {name: i for i, name in enumerate(registry)}
    for name in raw:
        if name not in index:
            raise PreprocessingError(f"unknown medication group {name!r}")
        vec[index[name]] = 1.0
    return vec


