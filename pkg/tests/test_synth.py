import numpy as np
import pytest

from mmshap.evaluation import roc_auc
from mmshap.nn import TrainConfig, build_mlp, class_weights_from_labels, train
from mmshap.synth import MEDICATION_RATES, GeneratorConfig, default_missing_rates, generate_cohort, inject_missingness

SMALL = dict(n_patients=300, vitals_length=(40, 90))


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(GeneratorConfig(seed=5, **SMALL))


class TestGenerateCohort:
    def test_shapes_and_ids(self, cohort):
        records, _ = cohort
        r = records[0]
        assert len(records) == 300
        assert r.static.shape == (76,) and r.hip.shape == (32,) and r.chest.shape == (32,)
        assert len(r.vitals) == 6
        assert len({rec.patient_id for rec in records}) == 300

    def test_prevalence_calibrated(self, cohort):
        records, truth = cohort
        prev = np.mean([r.label for r in records])
        assert abs(prev - 0.078) <= 0.01
        assert truth.prevalence == prev

    def test_balanced_prevalence(self):
        records, _ = generate_cohort(GeneratorConfig(seed=1, prevalence_target=0.5, **SMALL))
        assert np.mean([r.label for r in records]) == pytest.approx(0.5, abs=0.02)

    def test_static_heavy_default_share(self, cohort):
        share = cohort[1].signal_share
        assert share["static"] >= 0.8
        assert sum(share.values()) == pytest.approx(1.0)

    def test_static_only_share(self):
        _, truth = generate_cohort(GeneratorConfig(seed=0, modality_signal_weights=(1, 0, 0, 0, 0), **SMALL))
        assert list(truth.signal_share.values()) == [1.0, 0.0, 0.0, 0.0, 0.0]
        assert not any(truth.coefficients["hip"])

    def test_seeded(self):
        a, _ = generate_cohort(GeneratorConfig(seed=3, n_patients=20, vitals_length=(10, 20)))
        b, _ = generate_cohort(GeneratorConfig(seed=3, n_patients=20, vitals_length=(10, 20)))
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.static, rb.static)
            np.testing.assert_array_equal(ra.vitals["spo2"][1], rb.vitals["spo2"][1])
            assert ra.label == rb.label

    def test_medication_rates(self):
        records, _ = generate_cohort(GeneratorConfig(seed=2, n_patients=1500, vitals_length=(10, 12)))
        from mmshap.preprocess import encode_medication

        rates = np.mean([encode_medication(r.medications) for r in records], axis=0)
        np.testing.assert_allclose(rates, MEDICATION_RATES, atol=0.04)

    @pytest.mark.parametrize("prevalence", [0.0, 1.0, 1.5])
    def test_invalid_prevalence(self, prevalence):
        with pytest.raises(ValueError):
            generate_cohort(GeneratorConfig(prevalence_target=prevalence, **SMALL))

    def test_unachievable_prevalence(self):
        with pytest.raises(ValueError, match="unachievable"):
            generate_cohort(GeneratorConfig(n_patients=10, prevalence_target=0.01, vitals_length=(10, 12)))

    @pytest.mark.parametrize("seed", range(5))
    def test_null_signal_gives_chance_auc(self, seed):
        cfg = GeneratorConfig(seed=seed, n_patients=600, prevalence_target=0.3,
                              modality_signal_weights=(0, 0, 0, 0, 0), vitals_length=(10, 12))
        records, _ = generate_cohort(cfg)
        X = np.array([r.static for r in records])
        y = np.array([r.label for r in records])
        m = build_mlp([76, 1], ["sigmoid"], seed=seed)
        trained, _ = train(m, (X[:300], y[:300]), (X[300:450], y[300:450]),
                           TrainConfig(learning_rate=1e-2, max_epochs=10, seed=seed), class_weights_from_labels(y))
        assert 0.35 <= roc_auc(trained.predict_proba(X[450:]), y[450:]) <= 0.65


class TestInjectMissingness:
    def test_zero_rates_unchanged(self, cohort):
        records, _ = cohort
        out = inject_missingness(records[:20], {"static": 0.0, "vitals": 0.0, "med": 0.0}, seed=1)
        for a, b in zip(records, out):
            np.testing.assert_array_equal(a.static, b.static)
            np.testing.assert_array_equal(a.vitals["pulse"][1], b.vitals["pulse"][1])
            assert a.medications == b.medications

    def test_single_column_rate(self):
        records, _ = generate_cohort(GeneratorConfig(seed=0, n_patients=1000, vitals_length=(5, 6)))
        rates = np.zeros(76)
        rates[4] = 0.3
        out = inject_missingness(records, {"static": rates}, seed=0)
        mask = np.array([np.isnan(r.static) for r in out])
        assert mask[:, 4].mean() == pytest.approx(0.3, abs=0.03)
        assert mask.sum() == mask[:, 4].sum()

    def test_seeded_masks(self, cohort):
        records, _ = cohort
        a = inject_missingness(records[:30], default_missing_rates(), seed=9)
        b = inject_missingness(records[:30], default_missing_rates(), seed=9)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(np.isnan(ra.static), np.isnan(rb.static))
            np.testing.assert_array_equal(ra.vitals["bp_sys"][0], rb.vitals["bp_sys"][0])

    def test_input_not_modified(self, cohort):
        records, _ = cohort
        before = records[0].static.copy()
        inject_missingness(records[:5], {"static": 0.5}, seed=0)
        np.testing.assert_array_equal(records[0].static, before)

    def test_rate_bounds(self, cohort):
        with pytest.raises(ValueError):
            inject_missingness(cohort[0][:2], {"static": 1.0})
