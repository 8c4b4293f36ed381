import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from costq.errors import (
    DegenerateDesign,
    DimMismatch,
    EmptyData,
    LabelOutOfRange,
    SeparationWarning,
)
from costq.learners import (
    FittedModel,
    LearnerConfig,
    fit_classifier,
    fit_regressor,
    gradient_check,
    map_features,
    predict,
)

LIN = LearnerConfig(kind="linear")
LOGIT = LearnerConfig(kind="logistic", ridge=1e-4)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _coef_in_raw_coordinates(model):
    """Undo the internal standardization: (intercept, slopes) on raw features."""
    w = model.coef[1:] / model.feat_scale
    b = model.coef[0] - np.sum(model.coef[1:] * model.feat_mean / model.feat_scale)
    return b, w


class TestLinearRegression:
    def test_recovers_exact_line(self):
        model = fit_regressor(np.array([[1.0], [2.0], [3.0]]), np.array([2.0, 4.0, 6.0]), LIN)
        b, w = _coef_in_raw_coordinates(model)
        assert w[0] == pytest.approx(2.0, abs=1e-6)
        assert b == pytest.approx(0.0, abs=1e-6)
        assert model.predict(np.array([[5.0]]))[0] == pytest.approx(10.0, abs=1e-6)

    @pytest.mark.parametrize("kind", ["linear", "kernel"])
    def test_constant_targets_predicted_exactly(self, kind):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(40, 2))
        model = fit_regressor(X, np.full(40, 3.25), LearnerConfig(kind=kind))
        np.testing.assert_allclose(model.predict(X), 3.25, atol=1e-9)

    def test_noisy_slope_matches_ols_oracle(self):
        # oracle: closed-form OLS on the raw design, with classical SEs
        rng = np.random.default_rng(42)
        x = rng.normal(size=1000)
        t = 2.0 * x + rng.normal(scale=0.5, size=1000)
        Z = np.column_stack([np.ones_like(x), x])
        beta_hat, *_ = np.linalg.lstsq(Z, t, rcond=None)
        resid = t - Z @ beta_hat
        sigma2 = resid @ resid / (len(t) - 2)
        se = np.sqrt(sigma2 * np.linalg.inv(Z.T @ Z)[1, 1])

        model = fit_regressor(x[:, None], t, LIN)
        b, w = _coef_in_raw_coordinates(model)
        assert w[0] == pytest.approx(beta_hat[1], abs=1e-8)  # same minimizer
        assert abs(w[0] - 2.0) < 3 * se

    def test_degenerate_design_without_ridge(self):
        X = np.ones((10, 2))
        with pytest.raises(DegenerateDesign):
            fit_regressor(X, np.arange(10.0), LIN)
        fit_regressor(X, np.arange(10.0), LearnerConfig(kind="linear", ridge=0.1))

    def test_empty_data(self):
        with pytest.raises(EmptyData):
            fit_regressor(np.empty((0, 1)), np.empty(0), LIN)

    def test_ridge_norm_monotone_in_penalty(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(60, 3))
        t = X @ np.array([1.0, -2.0, 0.5]) + rng.normal(size=60)
        norms = []
        for lam in (1e-6, 1e-3, 1e-1, 1.0, 10.0):
            m = fit_regressor(X, t, LearnerConfig(kind="linear", ridge=lam))
            norms.append(np.linalg.norm(m.coef[1:]))
        assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))


class TestLogisticRegression:
    def test_separable_data_perfect_training_accuracy(self):
        X = np.concatenate([-np.linspace(1, 2, 20), np.linspace(1, 2, 20)])[:, None]
        y = np.array([0] * 20 + [1] * 20)
        model = fit_classifier(X, y, LearnerConfig(kind="logistic", ridge=0.1))
        acc = np.mean((model.predict(X) > 0.5) == y)
        assert acc == 1.0

    def test_all_zero_labels(self):
        X = np.linspace(-1, 1, 30)[:, None]
        with pytest.warns(SeparationWarning):
            model = fit_classifier(X, np.zeros(30, dtype=int),
                                   LearnerConfig(kind="logistic", ridge=1e-6))
        assert np.all(model.predict_proba(X)[:, 0] >= 0.99)
        assert model.separation

    def test_coefficients_match_fisher_oracle(self):
        # oracle: asymptotic SEs from the inverse Fisher information at the truth
        rng = np.random.default_rng(7)
        n = 5000
        x = rng.normal(size=n)
        p = _sigmoid(0.5 + 1.5 * x)
        y = (rng.random(n) < p).astype(int)
        Z = np.column_stack([np.ones(n), x])
        W = p * (1 - p)
        fisher = Z.T @ (Z * W[:, None])
        se = np.sqrt(np.diag(np.linalg.inv(fisher)))

        model = fit_classifier(x[:, None], y, LearnerConfig(kind="logistic", ridge=0.0))
        b, w = _coef_in_raw_coordinates(model)
        assert abs(b - 0.5) < 3 * se[0]
        assert abs(w[0] - 1.5) < 3 * se[1]

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            fit_classifier(np.zeros((4, 1)), np.array([0, 1, 2, 0]), LOGIT)

    def test_probabilities_in_open_unit_interval(self):
        X = np.linspace(-50, 50, 101)[:, None]
        y = (X[:, 0] > 0).astype(int)
        with pytest.warns(SeparationWarning):
            model = fit_classifier(X, y, LearnerConfig(kind="logistic", ridge=1e-8))
        P = model.predict_proba(X)
        assert np.all(P > 0) and np.all(P < 1)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(90, 2))
        y = rng.integers(0, 3, size=90)
        model = fit_classifier(X, y, LearnerConfig(kind="softmax", n_classes=3, ridge=1e-3))
        P = model.predict_proba(rng.normal(size=(50, 2)))
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(P > 0) and np.all(P < 1)

    def test_matches_marginals_with_constant_features(self):
        y = np.array([0] * 50 + [1] * 30 + [2] * 20)
        X = np.zeros((100, 1))
        model = fit_classifier(X, y, LearnerConfig(kind="softmax", n_classes=3,
                                                   feature_map="constant"))
        P = model.predict_proba(np.zeros((1, 1)))[0]
        np.testing.assert_allclose(P, [0.5, 0.3, 0.2], atol=1e-6)


class TestKernelSmoother:
    def test_interpolates_with_tiny_bandwidth(self):
        X = np.array([[0.0], [1.0], [2.0]])
        t = np.array([5.0, -1.0, 3.0])
        model = fit_regressor(X, t, LearnerConfig(kind="kernel", bandwidth=1e-3))
        np.testing.assert_allclose(model.predict(X), t, atol=1e-6)

    def test_constant_targets(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(30, 2))
        model = fit_regressor(X, np.full(30, 7.0), LearnerConfig(kind="kernel"))
        np.testing.assert_allclose(model.predict(rng.normal(size=(10, 2))), 7.0, atol=1e-9)

    def test_silverman_default_bandwidth(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(200, 2)) * np.array([1.0, 3.0])
        model = fit_regressor(X, rng.normal(size=200), LearnerConfig(kind="kernel"))
        expected = 1.06 * X.std(axis=0) * 200 ** (-0.2)
        np.testing.assert_allclose(model.bandwidth, expected, rtol=1e-12)

    def test_empty_region_falls_back_to_global_mean(self):
        X = np.zeros((5, 1))
        t = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        model = fit_regressor(X, t, LearnerConfig(kind="kernel", bandwidth=1e-3))
        far = model.predict(np.array([[1e6]]))
        assert far[0] == pytest.approx(3.0)

    def test_linear_smoother_in_targets(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(40, 1))
        q = rng.normal(size=(15, 1))
        t, u = rng.normal(size=40), rng.normal(size=40)
        cfg = LearnerConfig(kind="kernel", bandwidth=0.5)
        lhs = fit_regressor(X, 2.0 * t - 3.0 * u, cfg).predict(q)
        rhs = 2.0 * fit_regressor(X, t, cfg).predict(q) - 3.0 * fit_regressor(X, u, cfg).predict(q)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestGradientChecks:
    def test_logistic_gradient(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(20, 3))
        y = rng.integers(0, 2, size=20)
        err = gradient_check(LearnerConfig(kind="logistic", ridge=0.05), X, y)
        assert err <= 1e-6

    def test_linear_gradient(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(20, 3))
        t = rng.normal(size=20)
        err = gradient_check(LearnerConfig(kind="linear", ridge=0.05), X, t)
        assert err <= 1e-8

    def test_softmax_gradient(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(20, 2))
        y = rng.integers(0, 3, size=20)
        err = gradient_check(LearnerConfig(kind="softmax", n_classes=3, ridge=0.05), X, y)
        assert err <= 1e-6


class TestFeatureMaps:
    def test_poly2_includes_interactions(self):
        X = np.array([[2.0, 3.0]])
        Phi = map_features(X, "poly2")
        np.testing.assert_allclose(Phi[0], [2, 3, 4, 6, 9])

    def test_constant_map_is_empty(self):
        assert map_features(np.ones((4, 2)), "constant").shape == (4, 0)

    def test_callable_map(self):
        Phi = map_features(np.array([[1.0], [2.0]]), lambda X: np.hstack([X, np.sin(X)]))
        assert Phi.shape == (2, 2)


class TestModelContract:
    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(20)
        X = rng.normal(size=(200, 2))
        y = (rng.random(200) < _sigmoid(X[:, 0])).astype(int)
        cfg = LearnerConfig(kind="logistic", feature_map="poly2", ridge=1e-3, seed=5)
        m1 = fit_classifier(X, y, cfg)
        m2 = fit_classifier(X, y, cfg)
        assert np.array_equal(m1.coef, m2.coef)

    def test_dim_mismatch_on_predict(self):
        model = fit_regressor(np.ones((5, 2)), np.arange(5.0),
                              LearnerConfig(kind="linear", ridge=0.1))
        with pytest.raises(DimMismatch):
            model.predict(np.ones((3, 4)))

    def test_predict_function_alias(self):
        model = fit_regressor(np.array([[0.0], [1.0]]), np.array([0.0, 1.0]), LIN)
        np.testing.assert_allclose(predict(model, np.array([[2.0]])), [2.0], atol=1e-8)

    @pytest.mark.parametrize("make", [
        lambda: fit_regressor(np.random.default_rng(1).normal(size=(30, 2)),
                              np.random.default_rng(2).normal(size=30),
                              LearnerConfig(kind="linear", feature_map="poly2", ridge=1e-3)),
        lambda: fit_classifier(np.random.default_rng(3).normal(size=(30, 2)),
                               np.random.default_rng(4).integers(0, 2, size=30),
                               LearnerConfig(kind="logistic", ridge=1e-2)),
        lambda: fit_regressor(np.random.default_rng(5).normal(size=(30, 2)),
                              np.random.default_rng(6).normal(size=30),
                              LearnerConfig(kind="kernel")),
    ])
    def test_json_round_trip_preserves_predictions(self, make):
        model = make()
        back = FittedModel.from_json_dict(model.to_json_dict())
        q = np.random.default_rng(9).normal(size=(12, 2))
        np.testing.assert_allclose(back.predict(q), model.predict(q), atol=0)

    def test_custom_basis_not_serializable(self):
        model = fit_regressor(np.ones((5, 1)), np.arange(5.0),
                              LearnerConfig(kind="linear", ridge=0.1,
                                            feature_map=lambda X: X))
        with pytest.raises(ValueError):
            model.to_json_dict()
