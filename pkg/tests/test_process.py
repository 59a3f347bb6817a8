import logging

import numpy as np
import pytest

from ssdiff.analysis import covariance_stderr, empirical_covariance, entrywise_agreement
from ssdiff.errors import DomainError, ParameterError, ShapeError, StateError
from ssdiff.linops import materialize_dense
from ssdiff.oracles import (
    dense_posterior_simplified,
    dense_posterior_unsimplified,
    dense_transition_cov,
)
from ssdiff.process import (
    EXACT,
    ISOTROPIC_APPROX,
    DiffusionProcess,
    ddpm_posterior,
    forward_consistency_check,
    marginal_sample,
    posterior_params,
    posterior_sample,
    transition_cov_apply,
)
from ssdiff.schedules import linear_beta_schedule, make_resolution_schedule, single_level_schedule


class TestConstruction:
    def test_T_mismatch(self):
        with pytest.raises(ParameterError):
            DiffusionProcess(linear_beta_schedule(10), single_level_schedule(4, 12))

    def test_infeasible_warns_and_sampling_errors(self, caplog, monkeypatch):
        # downsampling steps always satisfy the bound, so inflate the spectrum
        import ssdiff.process as proc
        from ssdiff.linops import PowerIterationResult

        monkeypatch.setattr(proc, "lambda_max", lambda op, **kw: PowerIterationResult(10.0, 0, True))
        ns = linear_beta_schedule(4)
        rs = make_resolution_schedule("explicit", 1.0, [2, 4], 4, table=[4, 4, 4, 2, 2])
        with caplog.at_level(logging.WARNING):
            p = DiffusionProcess(ns, rs, 1)
        assert p.infeasible_steps == frozenset({3})
        assert "infeasible" in caplog.text
        params = posterior_params(p, np.zeros(p.shape(3)), np.zeros(p.shape(2)), 3)
        with pytest.raises(StateError):
            posterior_sample(p, params, np.zeros(p.shape(2)))
        with pytest.raises(StateError):
            p.require_feasible(3)
        p.require_feasible(2)

    def test_downsampling_always_feasible(self, three_level):
        assert three_level.infeasible_steps == frozenset()
        assert all(row.passed for row in three_level.psd_report().rows)


class TestMarginal:
    def test_t0_returns_x0(self, three_level, rng):
        x0 = rng.standard_normal(three_level.shape(0))
        out = marginal_sample(three_level, x0, 0, rng.standard_normal(three_level.shape(0)))
        np.testing.assert_array_equal(out, x0)

    def test_single_level_is_ddpm(self, single_level, rng):
        ns = single_level.noise
        x0 = rng.standard_normal(single_level.shape(0))
        eps = rng.standard_normal(single_level.shape(0))
        for t in (1, 250, 1000):
            want = np.sqrt(ns.alpha_bar[t]) * x0 + np.sqrt(1 - ns.alpha_bar[t]) * eps
            np.testing.assert_allclose(marginal_sample(single_level, x0, t, eps), want, atol=1e-14)

    def test_mean_matches_dense_past_transition(self, two_level, rng):
        t = two_level.resolution.transitions[0] + 3
        x0 = rng.standard_normal(two_level.shape(0))
        zero = np.zeros(two_level.shape(t))
        D = materialize_dense(two_level.cumulative_op(t))
        np.testing.assert_allclose(marginal_sample(two_level, x0, t, zero).ravel(), D @ x0.ravel(), atol=1e-10)

    def test_shape_errors(self, two_level):
        with pytest.raises(ShapeError):
            marginal_sample(two_level, np.zeros((1, 4, 4)), 1, np.zeros((1, 8, 8)))
        with pytest.raises(ShapeError):
            marginal_sample(two_level, np.zeros((1, 8, 8)), two_level.T, np.zeros((1, 8, 8)))

    def test_empirical_marginal_is_isotropic(self, two_level):
        t = two_level.resolution.transitions[0] + 5
        x0 = np.random.default_rng(0).uniform(-1, 1, two_level.shape(0))
        eps = np.random.default_rng(1).standard_normal((20000,) + two_level.shape(t))
        X = marginal_sample(two_level, x0, t, eps).reshape(20000, -1)
        C = empirical_covariance(X)
        target = two_level.noise.sigma[t] ** 2 * np.eye(C.shape[0])
        assert entrywise_agreement(C, target, covariance_stderr(X)).passed


class TestTransitionCov:
    def test_scalar_step_is_beta(self, single_level, rng):
        v = rng.standard_normal(single_level.shape(10))
        np.testing.assert_allclose(
            transition_cov_apply(single_level, 10, v), single_level.noise.beta[10] * v, atol=1e-15
        )

    def test_t1(self, two_level, rng):
        v = rng.standard_normal(two_level.shape(1))
        np.testing.assert_allclose(transition_cov_apply(two_level, 1, v), two_level.noise.sigma[1] ** 2 * v)

    def test_transition_matches_dense(self, two_level, rng):
        t = two_level.resolution.transitions[0]
        v = rng.standard_normal(two_level.shape(t))
        want = dense_transition_cov(two_level, t) @ v.ravel()
        np.testing.assert_allclose(transition_cov_apply(two_level, t, v).ravel(), want, atol=1e-10)


class TestPosteriorParams:
    def test_exact_residual_vanishes(self, two_level, rng):
        t = two_level.resolution.transitions[0]
        mu = rng.standard_normal(two_level.shape(t - 1))
        x_t = two_level.step_op(t).apply(mu)
        np.testing.assert_allclose(posterior_params(two_level, x_t, mu, t).mean, mu, atol=1e-14)

    def test_t0_rejected(self, two_level):
        with pytest.raises(DomainError):
            posterior_params(two_level, np.zeros((1, 8, 8)), np.zeros((1, 8, 8)), 0)

    def test_shape_mismatch(self, two_level):
        t = two_level.resolution.transitions[0]
        with pytest.raises(ShapeError):
            posterior_params(two_level, np.zeros((1, 8, 8)), np.zeros((1, 8, 8)), t)

    def test_ddpm_collapse(self, single_level, rng):
        ns = single_level.noise
        for t in (1, 2, 10, 500, 999, 1000):
            x_t = rng.standard_normal(single_level.shape(t))
            x0 = rng.uniform(-1, 1, single_level.shape(0))
            params = posterior_params(single_level, x_t, ns.a[t - 1] * x0, t)
            mean, var = ddpm_posterior(ns, x_t, x0, t)
            np.testing.assert_allclose(params.mean, mean, atol=1e-10)
            assert abs(params.scalar_variance - var) <= 1e-10
            assert var == pytest.approx(ns.posterior_variance(t), rel=1e-12)

    @pytest.mark.parametrize("offset", [0, 1])
    def test_woodbury_equivalence(self, three_level, rng, offset):
        for t0 in three_level.resolution.transitions:
            t = t0 + offset
            x_t = rng.standard_normal(three_level.shape(t))
            mu = rng.standard_normal(three_level.shape(t - 1))
            m5, c5 = dense_posterior_unsimplified(three_level, x_t, mu, t)
            m6, c6 = dense_posterior_simplified(three_level, x_t, mu, t)
            np.testing.assert_allclose(m5, m6, atol=1e-8)
            np.testing.assert_allclose(c5, c6, atol=1e-8)
            impl = posterior_params(three_level, x_t, mu, t)
            np.testing.assert_allclose(impl.mean.ravel(), m5, atol=1e-8)
            probe = np.eye(c6.shape[0]).reshape((-1,) + three_level.shape(t - 1))
            dense_cov = impl.cov_apply(probe).reshape(c6.shape[0], -1).T
            np.testing.assert_allclose(dense_cov, c6, atol=1e-12)

    def test_batched_params(self, two_level, rng):
        t = two_level.resolution.transitions[0]
        x_t = rng.standard_normal((3,) + two_level.shape(t))
        mu = rng.standard_normal((3,) + two_level.shape(t - 1))
        batched = posterior_params(two_level, x_t, mu, t).mean
        for i in range(3):
            np.testing.assert_allclose(batched[i], posterior_params(two_level, x_t[i], mu[i], t).mean, atol=1e-15)


@pytest.fixture(scope="module")
def small_transition():
    """4 -> 2 step (16-dim posterior) for cheap covariance statistics."""
    ns = linear_beta_schedule(40)
    p = DiffusionProcess(ns, make_resolution_schedule("equal", 1.0, [2, 4], 40), 1)
    t = p.resolution.transitions[0]
    params = posterior_params(p, np.zeros(p.shape(t)), np.zeros(p.shape(t - 1)), t)
    _, cov = dense_posterior_simplified(p, np.zeros(p.shape(t)), np.zeros(p.shape(t - 1)), t)
    return p, params, cov


class TestPosteriorSample:
    def test_t1_returns_mean(self, two_level, rng):
        x_t = rng.standard_normal(two_level.shape(1))
        mu = rng.standard_normal(two_level.shape(0))
        params = posterior_params(two_level, x_t, mu, 1)
        for mode in (EXACT, ISOTROPIC_APPROX):
            out = posterior_sample(two_level, params, rng.standard_normal(two_level.shape(0)), mode)
            np.testing.assert_array_equal(out, mu)

    def test_scalar_step_variance(self, single_level):
        t = 300
        ns = single_level.noise
        params = posterior_params(single_level, np.zeros(single_level.shape(t)), np.zeros(single_level.shape(t - 1)), t)
        eps = np.random.default_rng(3).standard_normal((10000,) + single_level.shape(t - 1))
        draws = posterior_sample(single_level, params, eps)
        var = draws.reshape(-1).var()
        assert var == pytest.approx(ns.posterior_variance(t), rel=0.05)

    def test_modes_identical_on_scalar_steps(self, single_level, rng):
        t = 42
        params = posterior_params(single_level, rng.standard_normal((1, 4, 4)), rng.standard_normal((1, 4, 4)), t)
        eps = rng.standard_normal((1, 4, 4))
        a = posterior_sample(single_level, params, eps, EXACT)
        b = posterior_sample(single_level, params, eps, ISOTROPIC_APPROX, rng.standard_normal((1, 4, 4)))
        np.testing.assert_array_equal(a, b)

    def test_unknown_mode(self, two_level):
        params = posterior_params(two_level, np.zeros((1, 8, 8)), np.zeros((1, 8, 8)), 2)
        with pytest.raises(ParameterError):
            posterior_sample(two_level, params, np.zeros((1, 8, 8)), "approx")

    def test_isotropic_needs_aux(self, two_level):
        t = two_level.resolution.transitions[0]
        params = posterior_params(two_level, np.zeros(two_level.shape(t)), np.zeros(two_level.shape(t - 1)), t)
        with pytest.raises(ParameterError):
            posterior_sample(two_level, params, np.ones(two_level.shape(t - 1)), ISOTROPIC_APPROX)

    def test_exact_covariance(self, small_transition):
        p, params, cov = small_transition
        eps = np.random.default_rng(11).standard_normal((100000,) + params.mean.shape)
        X = posterior_sample(p, params, eps).reshape(100000, -1)
        C = empirical_covariance(X)
        rep = entrywise_agreement(C, cov, covariance_stderr(X))
        assert rep.passed, rep

    def test_isotropic_covariance_structure(self, small_transition):
        p, params, cov = small_transition
        rng = np.random.default_rng(12)
        eps = rng.standard_normal((100000,) + params.mean.shape)
        aux = rng.standard_normal((100000,) + params.mean.shape)
        X = posterior_sample(p, params, eps, ISOTROPIC_APPROX, aux).reshape(100000, -1)
        C = empirical_covariance(X)
        se = covariance_stderr(X)
        zero_off = np.diag(np.diag(C))
        assert entrywise_agreement(C, zero_off, se, diagonal=False).passed
        # the exact covariance has off-diagonals far outside that noise band
        iu = np.triu_indices(cov.shape[0], 1)
        assert np.max(np.abs(cov[iu]) / se[iu]) > 8

    def test_literal_mean_matching_correlates_pixels(self, small_transition):
        p, params, _ = small_transition
        rng = np.random.default_rng(13)
        eps = rng.standard_normal((50000,) + params.mean.shape)
        aux = rng.standard_normal((50000,) + params.mean.shape)
        X = posterior_sample(p, params, eps, ISOTROPIC_APPROX, aux, match_mean=True).reshape(50000, -1)
        C = empirical_covariance(X)
        se = covariance_stderr(X)
        assert not entrywise_agreement(C, np.diag(np.diag(C)), se, diagonal=False).passed


class TestForwardConsistency:
    def test_scalar_steps(self, single_level):
        for t in range(1, 11):
            rep = forward_consistency_check(single_level, t, tol=1e-12)
            assert rep.passed, rep

    def test_every_step_three_level(self, three_level):
        for t in range(1, three_level.T + 1):
            assert forward_consistency_check(three_level, t).passed

    def test_t1(self, three_level):
        rep = forward_consistency_check(three_level, 1)
        assert rep.cov_error <= 1e-15
