import numpy as np
import pytest

from latshift.nn import ConfigError
from latshift.datagen import (gen_app_a, gen_app_b, GenParamsA, GenParamsB,
                              EmbedConfig, class_templates, PI_SOURCE_A,
                              PI_SOURCE_B, PI_TARGET_B, _sigmoid)
from latshift.baselines import (ErmHyper, train_erm, erm_predict,
                                bayes_oracle_app_a, bayes_oracle_app_b,
                                accuracy)


class TestErm:
    def test_separable_toy(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(400, 2))
        y = (x[:, 0] + x[:, 1] > 0).astype(int)
        clf = train_erm(x, y, ErmHyper(epochs=400, batch_size=64, lr=0.05,
                                       seed=1))
        assert accuracy(erm_predict(clf, x), y) >= 0.99

    def test_adam_option(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(300, 2))
        y = (x[:, 0] > 0).astype(int)
        clf = train_erm(x, y, ErmHyper(epochs=100, batch_size=64, lr=1e-2,
                                       optimizer="adam", seed=0))
        assert accuracy(erm_predict(clf, x), y) >= 0.97

    def test_predict_rows_normalized(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(50, 3))
        y = rng.integers(0, 3, size=50)
        clf = train_erm(x, y, ErmHyper(epochs=5, seed=0))
        p = erm_predict(clf, x)
        assert p.shape == (50, 3)
        assert np.all(p > 0)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_loss_trace_decreases(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(200, 2))
        y = (x[:, 0] > 0).astype(int)
        clf = train_erm(x, y, ErmHyper(epochs=50, batch_size=200, seed=0))
        assert clf.loss_trace[-1] < clf.loss_trace[0]

    def test_label_range_checked(self):
        with pytest.raises(ConfigError):
            train_erm(np.zeros((4, 2)), np.array([0, 1, 2, 3]), k_y=2)

    def test_single_class_warns(self):
        with pytest.warns(UserWarning):
            train_erm(np.zeros((4, 2)), np.zeros(4, dtype=int),
                      ErmHyper(epochs=1), k_y=2)

    def test_determinism(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(60, 2))
        y = rng.integers(0, 2, size=60)
        h = ErmHyper(epochs=10, seed=7)
        a = train_erm(x, y, h)
        b = train_erm(x, y, h)
        for wa, wb in zip(a.net.weights, b.net.weights):
            assert np.array_equal(wa, wb)


class TestOracleAppA:
    def test_rows_on_simplex(self):
        p = GenParamsA(d_x=4)
        x = gen_app_a(100, 4, [0.5, 0.5], seed=0).x
        pred = bayes_oracle_app_a(p, [0.3, 0.7], x)
        assert pred.shape == (100, 2)
        assert np.allclose(pred.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(pred >= 0)

    def test_point_mass_prior_reduces_to_one_subgroup(self):
        """With prior fixed on u, the oracle is the exact mixture over c."""
        p = GenParamsA(d_x=2)
        x = gen_app_a(50, 2, [0.5, 0.5], seed=1).x
        for u in (0, 1):
            pi = np.zeros(2)
            pi[u] = 1.0
            pred = bayes_oracle_app_a(p, pi, x)
            pc1 = _sigmoid(x[:, :2] @ p.m_c_x[u] + p.m_c_u[u])
            py1 = (1 - pc1) * _sigmoid(p.m_y_c[u, 0] + p.m_y_u[u]) \
                + pc1 * _sigmoid(p.m_y_c[u, 1] + p.m_y_u[u])
            assert np.allclose(pred[:, 1], py1, atol=1e-12)

    def test_noise_dims_ignored(self):
        p2 = GenParamsA(d_x=2)
        p8 = GenParamsA(d_x=8)
        batch = gen_app_a(40, 8, [0.2, 0.8], seed=2)
        a = bayes_oracle_app_a(p2, [0.2, 0.8], batch.x[:, :2])
        b = bayes_oracle_app_a(p8, [0.2, 0.8], batch.x)
        assert np.allclose(a, b, atol=1e-12)

    def test_monte_carlo_label_rate(self):
        """Oracle predictive must match the empirical P(Y=1 | x-cell)."""
        p = GenParamsA(d_x=2)
        batch = gen_app_a(200000, 2, [0.3, 0.7], seed=3)
        pred = bayes_oracle_app_a(p, [0.3, 0.7], batch.x)
        sel = (batch.x[:, 0] > 0) & (batch.x[:, 1] > 0)
        emp = batch.y[sel].mean()
        se = np.sqrt(emp * (1 - emp) / sel.sum())
        assert abs(pred[sel, 1].mean() - emp) <= 4 * se

    def test_beats_or_matches_any_fixed_rule(self):
        p = GenParamsA(d_x=2)
        batch = gen_app_a(50000, 2, [0.9, 0.1], seed=4)
        pred = bayes_oracle_app_a(p, [0.9, 0.1], batch.x)
        acc = accuracy(pred, batch.y)
        base = max(batch.y.mean(), 1 - batch.y.mean())
        assert acc >= base - 0.01


class TestOracleAppB:
    def test_rows_on_simplex(self):
        p = GenParamsB()
        x = gen_app_b(100, PI_SOURCE_B, seed=0).x
        pred = bayes_oracle_app_b(p, PI_SOURCE_B, x)
        assert pred.shape == (100, 2)
        assert np.allclose(pred.sum(axis=1), 1.0, atol=1e-12)

    def test_embedding_noise_free_limit(self):
        """With clean covariate embeddings the latent covariate class is
        recovered exactly, so the oracle matches the discrete-chain
        predictive."""
        p = GenParamsB()
        cfg = EmbedConfig()
        templates = class_templates(cfg)
        pi = PI_SOURCE_B
        for xt in (0, 1):
            pred = bayes_oracle_app_b(p, pi, templates[None, xt])[0]
            # discrete chain: P(y | x~) with the same prior
            pxt = p.p_xt_u()
            post_u = pi * pxt[xt]
            post_u /= post_u.sum()
            py = np.zeros(2)
            for u in range(3):
                for c in range(3):
                    py += post_u[u] * p.p_c_xt_u(xt, u)[c] * p.p_y_c_u(c, u)
            assert np.allclose(pred, py, atol=1e-9)

    def test_monte_carlo_accuracy(self):
        p = GenParamsB()
        batch = gen_app_b(20000, PI_TARGET_B, seed=5)
        pred = bayes_oracle_app_b(p, PI_TARGET_B, batch.x)
        acc = accuracy(pred, batch.y)
        assert 0.80 < acc < 0.95


class TestAccuracy:
    def test_exact_match(self):
        pred = np.array([[0.9, 0.1], [0.2, 0.8]])
        assert accuracy(pred, np.array([0, 1])) == 1.0
        assert accuracy(pred, np.array([1, 0])) == 0.0

    def test_tie_breaks_low(self):
        pred = np.array([[0.5, 0.5]])
        assert accuracy(pred, np.array([0])) == 1.0
        assert accuracy(pred, np.array([1])) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            accuracy(np.ones((3, 2)) / 2, np.zeros(4, dtype=int))
