import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmshap.nn import (
    ClassWeights,
    DenseLayer,
    MLPModel,
    NonFiniteError,
    TrainConfig,
    build_mlp,
    class_weights,
    class_weights_from_labels,
    gradient,
    leaky_relu,
    sigmoid,
    train,
    weighted_bce,
)
from oracles import central_differences, relative_error


class TestClassWeights:
    def test_balanced(self):
        w = class_weights(100, (50, 50))
        assert w.as_tuple() == (1.0, 1.0)

    def test_cohort_counts(self):
        # 131 deaths among 1669 patients
        w = class_weights(1669, (1538, 131))
        assert w.negative == pytest.approx(0.5426, abs=1e-4)
        assert w.positive == pytest.approx(6.3702, abs=1e-4)

    def test_small_hand_case(self):
        w = class_weights(4, (1, 3))
        assert w.negative == pytest.approx(2.0)
        assert w.positive == pytest.approx(0.6667, abs=1e-4)

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate class distribution"):
            class_weights(10, (10, 0))

    def test_counts_must_sum(self):
        with pytest.raises(ValueError):
            class_weights(10, (3, 3))

    def test_from_labels(self):
        w = class_weights_from_labels([0, 0, 0, 1])
        assert w.as_tuple() == pytest.approx((4 / 6, 2.0))

    @given(st.integers(1, 500), st.integers(1, 500))
    def test_weighted_counts_balance(self, n_neg, n_pos):
        w = class_weights(n_neg + n_pos, (n_neg, n_pos))
        assert w.negative * n_neg == pytest.approx(w.positive * n_pos)


class TestWeightedBCE:
    def test_half_prediction(self):
        assert weighted_bce(0.5, 1, ClassWeights(1, 1)) == pytest.approx(math.log(2))

    def test_linear_in_weight(self):
        assert weighted_bce(0.5, 1, ClassWeights(1, 2)) == pytest.approx(2 * math.log(2))

    def test_negative_class_weight(self):
        assert weighted_bce(0.9, 0, ClassWeights(1.5, 1)) == pytest.approx(3.4539, abs=1e-4)

    def test_clamped_extremes_are_finite(self):
        out = weighted_bce(np.array([0.0, 1.0]), np.array([1, 0]), ClassWeights(1, 1))
        np.testing.assert_allclose(out, -math.log(1e-7), rtol=1e-6)

    @pytest.mark.parametrize("bad", [-0.1, 1.1, float("nan")])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            weighted_bce(bad, 1, ClassWeights(1, 1))


class TestActivations:
    @pytest.mark.parametrize("x,slope,expected", [(3.0, 0.01, 3.0), (-2.0, 0.01, -0.02), (0.0, 0.3, 0.0)])
    def test_leaky_relu(self, x, slope, expected):
        assert leaky_relu(x, slope) == pytest.approx(expected)

    def test_sigmoid_extremes(self):
        out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


class TestForward:
    def test_identity_layer(self):
        m = MLPModel([DenseLayer(np.eye(2), np.zeros(2), "identity")])
        np.testing.assert_array_equal(m.forward(np.array([1.0, 2.0])), [1.0, 2.0])

    def test_zero_sigmoid_neuron(self):
        m = MLPModel([DenseLayer(np.zeros((1, 3)), [0.0], "sigmoid")])
        np.testing.assert_array_equal(m.predict_proba(np.random.default_rng(0).normal(size=(4, 3))), 0.5)

    def test_two_layer_hand_computation(self):
        W1 = np.array([[1.0, -1.0], [0.5, 2.0]])
        b1 = np.array([0.0, -1.0])
        W2 = np.array([[2.0, -3.0]])
        m = MLPModel([DenseLayer(W1, b1, "leaky_relu"), DenseLayer(W2, [0.25], "sigmoid")], 0.1)
        x = np.array([1.0, 2.0])
        # h = leaky([1-2, 0.5+4-1]) = [-0.1, 3.5]; logit = -0.2 - 10.5 + 0.25
        expected = 1.0 / (1.0 + math.exp(10.45))
        assert m.predict_proba(x)[0] == pytest.approx(expected, rel=1e-12)

    def test_dimension_mismatch(self):
        m = build_mlp([3, 2], ["identity"], seed=0)
        with pytest.raises(ValueError):
            m.forward(np.ones(4))

    def test_layer_chain_mismatch(self):
        with pytest.raises(ValueError):
            MLPModel([DenseLayer(np.ones((2, 3)), np.zeros(2)), DenseLayer(np.ones((1, 3)), [0.0])])


class TestGradient:
    @staticmethod
    def _fixture(seed):
        rng = np.random.default_rng(seed)
        dims = [int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 5)), 1]
        m = build_mlp(dims, ["leaky_relu", "leaky_relu", "sigmoid"], seed=seed, leaky_slope=0.05)
        X = rng.normal(size=(12, dims[0]))
        y = np.r_[np.zeros(6), np.ones(6)]
        return m, X, y, ClassWeights(0.7, 1.9)

    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("l2", [0.0, 0.01])
    def test_matches_finite_differences(self, seed, l2):
        m, X, y, w = self._fixture(seed)
        analytic = gradient(m, (X, y), w, l2)
        numeric = central_differences(lambda: m.loss_and_grad(X, y, w, l2)[0], m.parameters())
        for key in analytic:
            assert relative_error(analytic[key], numeric[key]) < 1e-5, key

    def test_l2_term_is_separable(self):
        m, X, y, w = self._fixture(3)
        g0 = gradient(m, (X, y), w, 0.0)
        g1 = gradient(m, (X, y), w, 0.2)
        for i, layer in enumerate(m.layers):
            np.testing.assert_allclose(g1[f"{i}.weights"] - g0[f"{i}.weights"], 0.4 * layer.weights, atol=1e-15)
            np.testing.assert_array_equal(g1[f"{i}.bias"], g0[f"{i}.bias"])

    def test_zero_weights_bias_gradient_is_mean_residual(self):
        m = MLPModel([DenseLayer(np.zeros((1, 2)), [0.0], "sigmoid")])
        X = np.array([[1.0, -1.0], [-1.0, 1.0], [2.0, 0.0], [-2.0, 0.0]])
        y = np.array([1, 0, 1, 0])
        g = gradient(m, (X, y), ClassWeights(1, 1))
        assert g["0.bias"][0] == pytest.approx(np.mean(0.5 - y))

    def test_non_finite_reports_layer(self):
        m = MLPModel([DenseLayer([[1e308, 1e308]], [0.0], "leaky_relu"), DenseLayer([[1.0]], [0.0], "sigmoid")])
        with pytest.raises(NonFiniteError, match="layer 0"):
            gradient(m, (np.array([[10.0, 10.0]]), np.array([1])), ClassWeights(1, 1))

    def test_empty_batch(self):
        m, *_ = self._fixture(0)
        with pytest.raises(ValueError):
            gradient(m, (np.empty((0, m.input_dim)), np.empty(0)), ClassWeights(1, 1))


class TestSerialization:
    def test_round_trip_is_bitwise(self, tmp_path):
        m = build_mlp([5, 4, 1], ["leaky_relu", "sigmoid"], seed=7, leaky_slope=0.02)
        m.save(tmp_path / "m.json")
        back = MLPModel.load(tmp_path / "m.json")
        for key, value in m.parameters().items():
            np.testing.assert_array_equal(back.parameters()[key], value)
        assert back.leaky_slope == m.leaky_slope

    def test_rejects_foreign_document(self):
        with pytest.raises(ValueError):
            MLPModel.from_dict({"format": "something else"})


def _separable(seed, n=200):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    return X, y


class TestTrain:
    def test_separable_reaches_perfect_auc(self):
        X, y = _separable(0)
        Xv, yv = _separable(1)
        m = build_mlp([2, 8, 1], ["leaky_relu", "sigmoid"], seed=0)
        cfg = TrainConfig(learning_rate=1e-2, max_epochs=50, patience=50, dropout=0.0, seed=0)
        _, hist = train(m, (X, y), (Xv, yv), cfg, class_weights_from_labels(y))
        assert hist.best_auc == pytest.approx(1.0, abs=2e-3)

    @pytest.mark.parametrize("seed", range(5))
    def test_null_labels_stay_near_chance(self, seed):
        rng = np.random.default_rng(seed)
        X, Xv = rng.normal(size=(300, 4)), rng.normal(size=(300, 4))
        y, yv = rng.integers(0, 2, 300), rng.integers(0, 2, 300)
        m = build_mlp([4, 8, 1], ["leaky_relu", "sigmoid"], seed=seed)
        cfg = TrainConfig(learning_rate=1e-2, max_epochs=20, seed=seed)
        trained, _ = train(m, (X, y), (Xv, yv), cfg, class_weights_from_labels(y))
        from mmshap.evaluation import roc_auc

        Xt, yt = rng.normal(size=(300, 4)), rng.integers(0, 2, 300)
        assert 0.35 <= roc_auc(trained.predict_proba(Xt), yt) <= 0.65

    def test_patience_zero_stops_after_first_stale_epoch(self):
        X, y = _separable(0, 60)
        m = build_mlp([2, 1], ["sigmoid"], seed=0)
        # zero learning rate cannot improve anything
        cfg = TrainConfig(learning_rate=1e-12, max_epochs=30, patience=0, dropout=0.0)
        _, hist = train(m, (X, y), (X, y), cfg, class_weights_from_labels(y))
        assert len(hist.epochs) == 2
        assert hist.best_epoch == 0

    def test_learning_rate_halves_on_plateau(self):
        X, y = _separable(0, 60)
        m = build_mlp([2, 1], ["sigmoid"], seed=0)
        cfg = TrainConfig(learning_rate=1e-12, max_epochs=12, patience=12, lr_halving_patience=3, dropout=0.0)
        _, hist = train(m, (X, y), (X, y), cfg, class_weights_from_labels(y))
        lrs = [e.learning_rate for e in hist.epochs[1:]]
        assert lrs[:3] == [1e-12] * 3
        assert lrs[3:6] == [0.5e-12] * 3
        assert lrs[6:9] == [0.25e-12] * 3

    def test_single_class_validation(self):
        X, y = _separable(0, 40)
        m = build_mlp([2, 1], ["sigmoid"], seed=0)
        with pytest.raises(ValueError):
            train(m, (X, y), (X, np.zeros(40)), TrainConfig(max_epochs=2), class_weights_from_labels(y))

    def test_input_model_untouched_and_deterministic(self):
        X, y = _separable(2)
        m = build_mlp([2, 4, 1], ["leaky_relu", "sigmoid"], seed=3)
        before = {k: v.copy() for k, v in m.parameters().items()}
        cfg = TrainConfig(learning_rate=1e-2, max_epochs=5, seed=11)
        a, _ = train(m, (X, y), (X, y), cfg, class_weights_from_labels(y))
        b, _ = train(m, (X, y), (X, y), cfg, class_weights_from_labels(y))
        for k, v in before.items():
            np.testing.assert_array_equal(m.parameters()[k], v)
            np.testing.assert_array_equal(a.parameters()[k], b.parameters()[k])

    def test_frozen_group_is_untouched(self):
        X, y = _separable(4)
        m = build_mlp([2, 4, 1], ["leaky_relu", "sigmoid"], seed=1)
        cfg = TrainConfig(learning_rate=5e-2, max_epochs=5, seed=0)
        out, _ = train(m, (X, y), (X, y), cfg, class_weights_from_labels(y), frozen=("0",))
        np.testing.assert_array_equal(out.layers[0].weights, m.layers[0].weights)
        assert not np.array_equal(out.layers[1].weights, m.layers[1].weights)
