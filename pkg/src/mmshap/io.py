"""On-disk formats shared by the CLI stages.

Static tables and embeddings are CSV with a ``patient_id`` column and ``NA``
for missing cells. Vitals are newline-delimited JSON, one object per patient
and timestamp: ``{"patient_id", "timestamp" (ISO-8601), "values": {channel:
value}}``. Medications are a long CSV (``patient_id,group``); a patient with no
rows has no medication record. Floats are written with ``repr`` so every
value round-trips exactly.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from mmshap.preprocess import VITAL_CHANNELS, VitalsSeries
from mmshap.records import PatientRecord

NA = "NA"


def _fmt(v: float) -> str:
    return NA if np.isnan(v) else repr(float(v))


def _parse(s: str) -> float:
    return float("nan") if s in (NA, "") else float(s)


def iso(t: float) -> str:
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat(timespec="microseconds")


def from_iso(s: str) -> float:
    return datetime.fromisoformat(s).timestamp()


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_matrix(path, ids, columns, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", *columns])
        for pid, row in zip(ids, np.asarray(values, dtype=float)):
            w.writerow([pid, *(_fmt(v) for v in row)])


def read_matrix(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        ids, rows = [], []
        for line in r:
            ids.append(line[0])
            rows.append([_parse(v) for v in line[1:]])
    values = np.array(rows, dtype=float).reshape(len(ids), len(header) - 1)
    return ids, header[1:], values


def write_labels(path, ids, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "label"])
        for pid, y in zip(ids, labels):
            w.writerow([pid, int(y)])


def read_labels(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {row["patient_id"]: int(row["label"]) for row in csv.DictReader(fh)}


def write_medications(path, records: dict) -> None:
    """``records`` maps patient id to a list of groups or ``None``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "group"])
        for pid, groups in records.items():
            for g in groups or ():
                w.writerow([pid, g])


def read_medications(path, ids) -> dict:
    found = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            found[row["patient_id"]].append(row["group"])
    return {pid: found.get(pid) for pid in ids}


def write_vitals(path, per_patient: dict) -> None:
    """``per_patient`` maps id to ``{channel: (times, values)}``; NaN values are omitted."""
    with open(path, "w") as fh:
        for pid, raw in per_patient.items():
            by_time = defaultdict(dict)
            for name in VITAL_CHANNELS:
                if name not in raw:
                    continue
                times, values = raw[name]
                for t, v in zip(np.asarray(times, dtype=float), np.asarray(values, dtype=float)):
                    if not np.isnan(v):
                        by_time[float(t)][name] = float(v)
            for t in sorted(by_time):
                fh.write(json.dumps({"patient_id": pid, "timestamp": iso(t), "values": by_time[t]}) + "\n")


def read_vitals(path) -> dict:
    acc = defaultdict(lambda: {c: ([], []) for c in VITAL_CHANNELS})
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            t = from_iso(rec["timestamp"])
            chans = acc[rec["patient_id"]]
            for name, v in rec["values"].items():
                if name not in chans:
                    raise ValueError(f"unknown vitals channel {name!r}")
                chans[name][0].append(t)
                chans[name][1].append(v)
    return {
        pid: {c: (np.array(ts, dtype=float), np.array(vs, dtype=float)) for c, (ts, vs) in chans.items()}
        for pid, chans in acc.items()
    }


def series_to_raw(series: VitalsSeries) -> dict:
    t = series.times()
    return {c: (t, series.channels[c]) for c in VITAL_CHANNELS}


def write_cohort(directory, records: list[PatientRecord], static_columns) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = [r.patient_id for r in records]
    write_matrix(d / "static.csv", ids, static_columns, np.array([r.static for r in records]))
    n_embed = len(records[0].hip)
    emb_cols = [f"e{i}" for i in range(n_embed)]
    write_matrix(d / "hip.csv", ids, emb_cols, np.array([r.hip for r in records]))
    write_matrix(d / "chest.csv", ids, emb_cols, np.array([r.chest for r in records]))
    write_vitals(d / "vitals.ndjson", {r.patient_id: r.vitals for r in records})
    write_medications(d / "medications.csv", {r.patient_id: r.medications for r in records})
    write_labels(d / "labels.csv", ids, [r.label for r in records])


def read_cohort(directory) -> tuple[list[PatientRecord], list[str]]:
    d = Path(directory)
    ids, static_cols, static = read_matrix(d / "static.csv")
    _, _, hip = read_matrix(d / "hip.csv")
    _, _, chest = read_matrix(d / "chest.csv")
    vitals = read_vitals(d / "vitals.ndjson")
    meds = read_medications(d / "medications.csv", ids)
    labels = read_labels(d / "labels.csv")
    empty = {c: (np.empty(0), np.empty(0)) for c in VITAL_CHANNELS}
    records = [
        PatientRecord(pid, static[i], hip[i], chest[i], vitals.get(pid, empty), meds[pid], labels[pid])
        for i, pid in enumerate(ids)
    ]
    return records, static_cols
