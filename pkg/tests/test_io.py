import math

import numpy as np

from mmshap.io import (
    from_iso,
    iso,
    read_cohort,
    read_matrix,
    read_medications,
    read_vitals,
    write_cohort,
    write_matrix,
    write_medications,
    write_vitals,
)
from mmshap.pipeline import load_processed, preprocess_cohort, save_processed
from mmshap.synth import GeneratorConfig, default_missing_rates, generate_cohort, inject_missingness


def test_iso_round_trip():
    t = 1_577_836_800.123456
    assert from_iso(iso(t)) == t
    assert iso(0.0).endswith("+00:00")


def test_matrix_round_trip_with_missing(tmp_path):
    vals = np.array([[0.1, math.nan], [1 / 3, -2.5e-300]])
    write_matrix(tmp_path / "m.csv", ["a", "b"], ["x", "y"], vals)
    ids, cols, back = read_matrix(tmp_path / "m.csv")
    assert ids == ["a", "b"] and cols == ["x", "y"]
    np.testing.assert_array_equal(back, vals)


def test_medications_distinguish_absent_and_empty(tmp_path):
    write_medications(tmp_path / "m.csv", {"a": ["Propofol"], "b": None})
    assert read_medications(tmp_path / "m.csv", ["a", "b"]) == {"a": ["Propofol"], "b": None}


def test_vitals_drop_missing_samples(tmp_path):
    t = np.array([0.0, 15.0, 30.0])
    write_vitals(tmp_path / "v.ndjson", {"p": {"pulse": (t, np.array([60.0, math.nan, 62.0]))}})
    back = read_vitals(tmp_path / "v.ndjson")["p"]
    np.testing.assert_array_equal(back["pulse"][0], [0.0, 30.0])
    assert len(back["spo2"][0]) == 0


def test_cohort_round_trip(tmp_path):
    cfg = GeneratorConfig(seed=0, n_patients=12, prevalence_target=0.25, vitals_length=(20, 30))
    records, _ = generate_cohort(cfg)
    records = inject_missingness(records, default_missing_rates(), seed=0)
    cols = [f"s{i}" for i in range(76)]
    write_cohort(tmp_path, records, cols)
    back, back_cols = read_cohort(tmp_path)
    assert back_cols == cols
    for a, b in zip(records, back):
        assert a.patient_id == b.patient_id and a.label == b.label and a.medications == b.medications
        np.testing.assert_array_equal(a.static, b.static)
        np.testing.assert_array_equal(a.hip, b.hip)
        for name, (t, v) in a.vitals.items():
            np.testing.assert_allclose(b.vitals[name][0], t, rtol=0, atol=1e-6)
            np.testing.assert_array_equal(b.vitals[name][1], v)


def test_processed_round_trip(tmp_path):
    records, _ = generate_cohort(GeneratorConfig(seed=1, n_patients=15, prevalence_target=0.3, vitals_length=(20, 30)))
    cohort = preprocess_cohort(inject_missingness(records, default_missing_rates(), seed=1), knn_k=3)
    save_processed(tmp_path, cohort)
    back = load_processed(tmp_path)
    assert back.ids == cohort.ids
    np.testing.assert_array_equal(back.inputs, cohort.inputs)
    np.testing.assert_array_equal(back.labels, cohort.labels)
    assert back.inputs.shape == (15, 193)
