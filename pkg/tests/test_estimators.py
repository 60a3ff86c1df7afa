import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dope import pk
from dope.data import stack_latent, stack_observations, stream
from dope.estimators import (DegenerateVarianceError, EstimateReport, FoldAssignment, Z_95, corrupt_nuisance,
                             dope_crossfit, dope_from_nuisances, plugin_estimate, plugin_from_predictions,
                             plugin_from_values, ppi_estimate, ppi_from_terms, pseudo_outcome, pseudo_outcomes,
                             truth_from_pool, variance_and_ci, weighted_residuals)
from dope.functionals import FunctionalSpec, functional_value, riesz_representer_wg
from dope.operators import init_params, pk_fno_config
from dope.riesz import BetaModel, oracle_model

G = pk.default_grid()
W = G.weights()
TINY = pk_fno_config(hidden=6, modes=4)
finite = st.floats(-10, 10)


@pytest.fixture(scope="module")
def small():
    data = pk.generate_pk_dataset(12, 0.5, stream(1, "est"))
    return data, stack_observations(data, pk.pk_features), stack_latent(data)


class TestVariance:
    def test_two_points(self):
        # [TRIVIAL] V = (a - b)^2 / 8
        v, ci = variance_and_ci([1.0, 3.0])
        assert v == pytest.approx(0.5)
        np.testing.assert_allclose(ci, [2 - Z_95 * np.sqrt(0.5), 2 + Z_95 * np.sqrt(0.5)])

    def test_constant(self):
        v, ci = variance_and_ci(np.full(5, 0.3))
        assert v == 0.0 and ci[0] == ci[1] == pytest.approx(0.3)

    def test_too_few(self):
        with pytest.raises(DegenerateVarianceError):
            variance_and_ci([1.0])

    @given(arrays(np.float64, st.integers(2, 30), elements=finite))
    def test_matches_population_variance(self, psi):
        v, _ = variance_and_ci(psi)
        np.testing.assert_allclose(v, np.var(psi) / len(psi), rtol=1e-10, atol=1e-300)

    def test_clt_coverage(self):
        # [DERIVED] standard normal pseudo-outcomes, n = 1e4, 1e3 replications: coverage 0.95 +- 0.02
        rng = np.random.default_rng(0)
        hits = 0
        for _ in range(1000):
            lo, hi = variance_and_ci(rng.standard_normal(10_000))[1]
            hits += lo <= 0 <= hi
        assert abs(hits / 1000 - 0.95) <= 0.02


class TestPseudoOutcomes:
    def test_zero_residuals(self, small):
        # [TRIVIAL] Y = S-hat(X): psi = g(S-hat)
        data, batch, latent = small
        spec = FunctionalSpec("tat")
        s = np.array(latent)
        exact = batch.__class__(batch.features, batch.idx, np.take_along_axis(s, batch.idx, 1) * batch.mask,
                                batch.mask, batch.p, batch.xi)
        plug, corr = pseudo_outcomes(s, np.ones_like(s), exact, spec, W)
        np.testing.assert_allclose(corr, 0.0, atol=1e-15)
        np.testing.assert_allclose(plug, functional_value(spec, s, W))

    def test_zero_beta_is_plugin(self, small):
        _, batch, latent = small
        rep = dope_from_nuisances(batch, latent + 0.1, np.zeros_like(latent), FunctionalSpec("auc"), W)
        np.testing.assert_allclose(rep.pseudo_outcomes, functional_value(FunctionalSpec("auc"), latent + 0.1, W))

    def test_weighted_residual_arithmetic(self, small):
        _, batch, latent = small
        beta = np.random.default_rng(0).standard_normal(latent.shape)
        r = weighted_residuals(latent, beta, batch)
        i = 3
        k = batch.mask[i] > 0
        idx = batch.idx[i][k]
        assert r[i] == pytest.approx(np.mean(beta[i, idx] * (batch.y[i][k] - latent[i, idx])))

    def test_single_record_matches_batch(self, small):
        data, batch, latent = small
        spec = FunctionalSpec("tat")
        s_hat = init_params(TINY, 0)
        beta = oracle_model(spec, W)
        one = pseudo_outcome(s_hat, beta, data[2], spec, W, pk.pk_features, latent=latent[2])
        from dope.operators import predict
        s_pred = predict(s_hat, batch.features)
        plug, corr = pseudo_outcomes(s_pred, beta.on_grid(batch, latent=latent), batch, spec, W)
        assert one == pytest.approx(plug[2] + corr[2], rel=1e-12)

    def test_index_outside_grid(self, small):
        _, batch, latent = small
        with pytest.raises(IndexError):
            weighted_residuals(latent[:, :10], latent[:, :10], batch)

    def test_oracle_unbiased(self):
        # [DERIVED] oracle nuisances: the pseudo-outcome mean matches an independent truth pool
        data = pk.generate_pk_dataset(4000, 0.5, stream(2, "est", "oracle"))
        batch, latent = stack_observations(data, pk.pk_features), stack_latent(data)
        spec = FunctionalSpec("tat")
        rep = dope_from_nuisances(batch, latent, oracle_model(spec, W).on_grid(batch, latent=latent), spec, W)
        _, pool = pk.sample_pk_inputs(20_000, stream(2, "est", "pool"))
        g = functional_value(spec, pool, W)
        se = np.sqrt(rep.variance_hat + g.var() / len(g))
        assert abs(rep.theta_hat - g.mean()) < 3 * se


class TestPlugin:
    def test_oracle_surrogate_equals_truth(self):
        _, pool = pk.sample_pk_inputs(50, stream(3, "est"))
        spec = FunctionalSpec("soft_cmax")
        rep = plugin_from_predictions(pool, spec, W)
        assert rep.theta_hat == pytest.approx(truth_from_pool(pool, spec, W), abs=1e-12)
        assert rep.variance_hat == pytest.approx(functional_value(spec, pool, W).var(ddof=1) / 50)

    def test_single_input_degenerate(self):
        rep = plugin_from_values([0.4])
        assert rep.variance_hat == 0.0 and rep.meta["degenerate_ci"]

    def test_empty(self):
        with pytest.raises(ValueError):
            plugin_from_values([])
        with pytest.raises(ValueError):
            plugin_estimate(init_params(TINY, 0), np.zeros((0, 128, 4)), FunctionalSpec("auc"), W)


class TestReport:
    def test_json(self, small):
        _, batch, latent = small
        rep = dope_from_nuisances(batch, latent, np.ones_like(latent), FunctionalSpec("auc"), W, meta={"seed": 3})
        d = json.loads(rep.to_json())
        assert d["theta_hat"] == pytest.approx(rep.theta_hat)
        assert rep.theta_hat == pytest.approx(np.mean(rep.pseudo_outcomes))
        assert rep.covers(rep.theta_hat)

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            EstimateReport(1.0, np.array([1.0, 2.0]), 0.1, (0.0, 2.0), "dope", {})


class TestCrossFit:
    def test_folds_partition(self):
        f = FoldAssignment.balanced(11, 3, np.random.default_rng(0))
        allm = np.sort(np.concatenate([f.members(j) for j in range(3)]))
        np.testing.assert_array_equal(allm, np.arange(11))
        assert set(f.complement(1)).isdisjoint(f.members(1))
        assert max(len(f.members(j)) for j in range(3)) - min(len(f.members(j)) for j in range(3)) <= 1

    def test_single_fold_rejected(self, small):
        data, _, _ = small
        with pytest.raises(ValueError):
            dope_crossfit(data, FunctionalSpec("auc"), TINY, "unstructured", W, pk.pk_features, J=1, epochs=1)

    def test_fold_too_small(self, small):
        data, _, _ = small
        with pytest.raises(ValueError):
            dope_crossfit(data[:3], FunctionalSpec("auc"), TINY, "unstructured", W, pk.pk_features, J=2, epochs=1)

    def test_deterministic(self, small):
        data, _, _ = small
        a = dope_crossfit(data, FunctionalSpec("tat"), TINY, "structured", W, pk.pk_features, seed=4, epochs=1)
        b = dope_crossfit(data, FunctionalSpec("tat"), TINY, "structured", W, pk.pk_features, seed=4, epochs=1)
        assert a.theta_hat == b.theta_hat
        assert a.method == "dope_structured" and a.meta["J"] == 2

    def test_oracle_mode(self, small):
        data, _, _ = small
        rep = dope_crossfit(data, FunctionalSpec("auc"), TINY, "oracle", W, pk.pk_features, seed=0, epochs=1)
        assert rep.method == "dope_oracle"
        assert np.isfinite(rep.se)


class TestPPI:
    def test_reduces_to_dope(self, small):
        # [TRIVIAL] no unlabeled inputs: identical estimate and variance
        _, batch, latent = small
        spec = FunctionalSpec("tat")
        s_hat = init_params(TINY, 0)
        beta = oracle_model(spec, W)
        ppi = ppi_estimate(batch, np.zeros((0, 128, 4)), s_hat, beta, spec, W, latent=latent)
        from dope.operators import predict
        s_pred = predict(s_hat, batch.features)
        dope = dope_from_nuisances(batch, s_pred, beta.on_grid(batch, latent=latent), spec, W)
        assert ppi.theta_hat == pytest.approx(dope.theta_hat, rel=1e-14)
        assert ppi.variance_hat == pytest.approx(dope.variance_hat, rel=1e-12)

    @given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite),
           arrays(np.float64, st.integers(0, 20), elements=finite))
    def test_unlabeled_only_move_plugin_average(self, g_lab, corr, g_unl):
        rep = ppi_from_terms(g_lab, corr, g_unl)
        g_all = np.concatenate([g_lab, g_unl])
        assert rep.theta_hat == pytest.approx(g_all.mean() + corr.mean(), abs=1e-9)
        np.testing.assert_array_equal(rep.corrections, corr)
        assert rep.theta_hat == pytest.approx(np.mean(rep.pseudo_outcomes), abs=1e-9)

    def test_variance_formula(self):
        # [DERIVED] s_g/N + s_c/n1 + 2 s_gc/N, all population moments
        rng = np.random.default_rng(0)
        g_lab, corr, g_unl = rng.standard_normal(8), rng.standard_normal(8), rng.standard_normal(24)
        rep = ppi_from_terms(g_lab, corr, g_unl)
        g = np.concatenate([g_lab, g_unl])
        expected = (g.var() / 32 + corr.var() / 8
                    + 2 * np.mean((g_lab - g.mean()) * (corr - corr.mean())) / 32)
        assert rep.variance_hat == pytest.approx(expected)

    def test_requires_labels(self):
        with pytest.raises(ValueError):
            ppi_from_terms([], [], [1.0])


class TestCorruption:
    def test_delta_zero(self):
        f, o = np.array([1.0, 2.0]), np.array([0.5, 0.5])
        np.testing.assert_array_equal(corrupt_nuisance("S", f, o, 0.0), f)

    @given(st.floats(0.0, 0.5))
    def test_zero_error_is_invariant(self, delta):
        o = np.array([0.3, -1.0])
        np.testing.assert_allclose(corrupt_nuisance("beta", o, o, delta), o)

    def test_scaling(self):
        f, o = np.array([1.0]), np.array([0.0])
        np.testing.assert_allclose(corrupt_nuisance("S", f, o, 0.5), [1.5])

    def test_errors(self):
        with pytest.raises(LookupError):
            corrupt_nuisance("S", np.ones(2), None, 0.1)
        with pytest.raises(ValueError):
            corrupt_nuisance("S", np.ones(2), np.ones(2), 0.7)
        with pytest.raises(ValueError):
            corrupt_nuisance("xi", np.ones(2), np.ones(2), 0.1)
