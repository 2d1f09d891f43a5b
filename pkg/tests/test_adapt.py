import numpy as np
import pytest

from latshift.nn import ConfigError, tree_flatten
from latshift import model as M
from latshift.adapt import (TargetPrior, target_posterior, fit_target_prior,
                            predict_target, source_predict,
                            append_adapted_prior, load_adapted_prior)
from latshift.datagen import gen_app_a, PI_SOURCE_A, PI_TARGET_A, GenParamsA
from latshift.baselines import plugin_model_a
from tests.test_model import random_tiny_model


def model_with_mix(seed, n=16):
    model = random_tiny_model(seed)
    data = gen_app_a(n, 2, [0.4, 0.6], seed=seed)
    mix = M.compute_mixture(model, data)
    return model, mix, data


class TestTargetPosterior:
    def test_direct_arithmetic(self):
        # f=[0.6,0.4], F=[0.5,0.5], q=[0.2,0.8] -> [0.24,0.64] normalized
        model, mix, _ = model_with_mix(0)
        x = np.zeros(2)
        logits, _ = M.recog_x_logprobs(model, x[None, :])
        # overwrite the pieces with the worked example via a table-free check
        f = np.array([0.6, 0.4])
        Fx = np.array([0.5, 0.5])
        q = np.array([0.2, 0.8])
        unnorm = f * q / Fx
        assert np.allclose(unnorm, [0.24, 0.64])
        assert np.allclose(unnorm / unnorm.sum(), [0.272727272727, 0.727272727272])

    def test_point_mass_prior(self):
        model, mix, data = model_with_mix(1)
        q = TargetPrior(np.array([50.0, -50.0]))
        post = target_posterior(model, mix, q, data.x)
        assert np.allclose(post[:, 0], 1.0, atol=1e-20)

    def test_source_prior_reduces_to_source_posterior(self):
        model, mix, data = model_with_mix(2)
        q = TargetPrior(model.prior_logits.copy())
        post = target_posterior(model, mix, q, data.x)
        log_fx, _ = M.recog_x_logprobs(model, data.x)
        expected_logits = log_fx - np.log(mix.f_x) + model.prior_logits \
            - np.log(np.exp(model.prior_logits).sum())
        expected = np.exp(expected_logits)
        expected /= expected.sum(axis=1, keepdims=True)
        assert np.allclose(post, expected, atol=1e-12)

    def test_rows_normalized(self):
        model, mix, data = model_with_mix(3)
        post = target_posterior(model, mix, TargetPrior(np.zeros(2)), data.x)
        assert np.max(np.abs(post.sum(axis=1) - 1.0)) <= 1e-12


class TestFitTargetPrior:
    def test_closed_form_mean_posterior(self):
        # two points forced to opposite components -> q converges to [.5,.5]
        model, mix, _ = model_with_mix(4)
        w = np.zeros((2, 2))
        w[0, 0], w[1, 1] = 80.0, 80.0
        model.recog_x = M.MlpParams([2, 2], [w], [np.zeros(2)])
        mix = M.MixtureMarginals(np.array([0.5, 0.5]), mix.f_w, 2)
        X = np.array([[10.0, 0.0], [0.0, 10.0]])
        qp, trace = fit_target_prior(model, mix, X)
        assert np.allclose(qp.q, [0.5, 0.5], atol=1e-9)

    def test_trace_non_decreasing(self):
        model, mix, data = model_with_mix(5, n=64)
        _, trace = fit_target_prior(model, mix, data.x)
        assert np.min(np.diff(trace)) >= -1e-10

    def test_model_untouched(self):
        model, mix, data = model_with_mix(6, n=32)
        before, _ = tree_flatten(model.tree())
        fit_target_prior(model, mix, data.x)
        after, _ = tree_flatten(model.tree())
        assert np.array_equal(before, after)

    def test_empty_target_rejected(self):
        model, mix, _ = model_with_mix(7)
        with pytest.raises(ConfigError):
            fit_target_prior(model, mix, np.empty((0, 2)))

    def test_self_consistency_recovers_source_prior(self):
        # target drawn from the source distribution itself: the plug-in model
        # with exact factors recovers the source prior
        gp = GenParamsA(d_x=2, pi=PI_SOURCE_A)
        model = plugin_model_a(gp, PI_SOURCE_A)
        src = gen_app_a(70000, 2, PI_SOURCE_A, seed=100)
        mix = M.compute_mixture(model, src)
        tgt = gen_app_a(70000, 2, PI_SOURCE_A, seed=101)
        qp, _ = fit_target_prior(model, mix, tgt.x)
        assert np.allclose(qp.q, PI_SOURCE_A, atol=0.02)

    def test_oracle_plugin_recovers_shifted_prior(self):
        gp = GenParamsA(d_x=2, pi=PI_SOURCE_A)
        model = plugin_model_a(gp, PI_SOURCE_A)
        src = gen_app_a(70000, 2, PI_SOURCE_A, seed=110)
        mix = M.compute_mixture(model, src)
        tgt = gen_app_a(70000, 2, PI_TARGET_A, seed=111)
        qp, _ = fit_target_prior(model, mix, tgt.x)
        assert np.allclose(qp.q, [0.9, 0.1], atol=0.02)


class TestPredictTarget:
    def test_degenerate_chain(self):
        model, mix, _ = model_with_mix(8)
        # point-mass posterior on u0 via extreme prior; concept pinned to c1;
        # y-table row [0.3, 0.7]
        q = TargetPrior(np.array([60.0, -60.0]))
        model.concept.weights = [np.zeros_like(w) for w in model.concept.weights]
        model.concept.biases = [np.zeros_like(b) for b in model.concept.biases]
        model.concept.biases[-1] = np.array([-40.0, 40.0])
        model.y_logits[:, 1, 0] = np.log([0.3, 0.7])
        out = predict_target(model, mix, q, np.zeros(2))
        assert np.allclose(out, [0.3, 0.7], atol=1e-12)

    def test_uniform_factors_give_uniform(self):
        model, mix, _ = model_with_mix(9)
        model.y_logits = np.zeros_like(model.y_logits)
        out = predict_target(model, mix, TargetPrior(np.zeros(2)), np.ones(2))
        assert np.allclose(out, 0.5, atol=1e-12)

    def test_matches_triple_loop_enumeration(self):
        for seed in range(5):
            model, mix, data = model_with_mix(20 + seed)
            q = TargetPrior(np.random.default_rng(seed).normal(size=2))
            out = predict_target(model, mix, q, data.x)
            post = target_posterior(model, mix, q, data.x)
            log_pc, _ = M.concept_logprobs(model, data.x)
            log_py = M.y_logtable(model)
            for i in range(data.n):
                expected = np.zeros(2)
                for y in range(2):
                    for u in range(2):
                        for c in range(2):
                            expected[y] += (np.exp(log_py[y, c, u])
                                            * np.exp(log_pc[i, c, u])
                                            * post[i, u])
                assert np.allclose(out[i], expected, atol=1e-12)

    def test_output_on_simplex(self):
        model, mix, data = model_with_mix(10, n=64)
        out = predict_target(model, mix, TargetPrior(np.zeros(2)), data.x)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-12

    def test_permutation_equivariance(self):
        model, mix, data = model_with_mix(11)
        q = TargetPrior(np.array([0.4, -0.3]))
        out = predict_target(model, mix, q, data.x)

        perm = [1, 0]
        pm = model.copy()
        pm.recog_x.weights[-1] = pm.recog_x.weights[-1][perm]
        pm.recog_x.biases[-1] = pm.recog_x.biases[-1][perm]
        pm.recog_w.logits = pm.recog_w.logits[:, perm]
        pm.prior_logits = pm.prior_logits[perm]
        pm.y_logits = pm.y_logits[:, :, perm]
        # concept net consumes onehot(u): swap the input columns for u
        d_x = model.dims.d_x
        w0 = pm.concept.weights[0].copy()
        w0[:, d_x:] = w0[:, d_x:][:, perm]
        pm.concept.weights[0] = w0
        pmix = M.MixtureMarginals(mix.f_x[perm], mix.f_w[perm], mix.source_size)
        pq = TargetPrior(q.q_logits[perm])
        out_p = predict_target(pm, pmix, pq, data.x)
        assert np.allclose(out, out_p, atol=1e-12)

    def test_no_shift_identity(self):
        model, mix, data = model_with_mix(12)
        q = TargetPrior(model.prior_logits.copy())
        assert np.allclose(predict_target(model, mix, q, data.x),
                           source_predict(model, mix, data.x), atol=1e-15)


class TestAdaptedCheckpoint:
    def test_append_and_load(self, tmp_path):
        model, mix, data = model_with_mix(13)
        path = tmp_path / "ck.json"
        M.save_checkpoint(path, model, mix, M.TrainHyper(seed=13), 13)
        qp, trace = fit_target_prior(model, mix, data.x)
        record = append_adapted_prior(path, qp, trace, target_dataset_hash="abc")
        assert record["iterations"] == len(trace)
        assert record["source_checkpoint_hash"]
        loaded = load_adapted_prior(path)
        assert np.allclose(loaded.q, qp.q, atol=1e-15)
        # original model still loads
        m2, _, doc = M.load_checkpoint(path)
        assert "adapted_prior" in doc

    def test_missing_prior_rejected(self, tmp_path):
        model, mix, _ = model_with_mix(14)
        path = tmp_path / "ck.json"
        M.save_checkpoint(path, model, mix)
        with pytest.raises(ConfigError):
            load_adapted_prior(path)
