from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from eubayes import numerics as nx


class TestSpecialFunctions:
    def test_log_gamma_known_values(self):
        assert nx.log_gamma(1.0) == pytest.approx(0.0, abs=1e-15)
        assert nx.log_gamma(5.0) == pytest.approx(math.log(24.0), abs=1e-12)
        assert nx.log_gamma(0.5) == pytest.approx(0.5 * math.log(math.pi), abs=1e-12)

    def test_log_gamma_against_mpmath(self):
        # absolute 1e-12, or a few ulps of the value where |ln Gamma| is large
        xs = np.geomspace(1e-3, 1e6, 400)
        got = nx.log_gamma(xs)
        ref = np.array([float(mpmath.loggamma(mpmath.mpf(float(x)))) for x in xs])
        tol = np.maximum(1e-12, 4 * np.spacing(np.abs(ref)))
        assert np.all(np.abs(got - ref) <= tol)

    def test_log_gamma_recurrence(self):
        x = np.round(np.arange(0.1, 100.05, 0.1), 10)
        err = np.abs(nx.log_gamma(x + 1) - nx.log_gamma(x) - np.log(x))
        assert err.max() <= 1e-10

    @pytest.mark.parametrize("bad", [0.0, -1.0, math.inf, math.nan])
    def test_log_gamma_domain(self, bad):
        with pytest.raises(nx.DomainError):
            nx.log_gamma(bad)

    def test_digamma_values(self):
        # oracle: high-order central difference of mpmath's log-gamma
        for x, ref in [(1.0, -0.5772156649), (0.5, -1.9635100260)]:
            d = float(mpmath.diff(mpmath.loggamma, x))
            assert d == pytest.approx(ref, abs=1e-10)
            assert nx.digamma(x) == pytest.approx(d, abs=1e-10)

    def test_digamma_recurrence_and_fd(self):
        x = np.round(np.arange(0.1, 100.05, 0.1), 10)
        assert np.abs(nx.digamma(x + 1) - nx.digamma(x) - 1 / x).max() < 1e-10
        h = 1e-5
        fd = (nx.log_gamma(x + h) - nx.log_gamma(x - h)) / (2 * h)
        assert np.abs(fd - nx.digamma(x)).max() < 1e-6

    def test_digamma_domain(self):
        with pytest.raises(nx.DomainError):
            nx.digamma(-0.5)

    def test_log_beta(self):
        assert nx.log_beta(1.0, 1.0) == pytest.approx(0.0, abs=1e-15)
        for a in [0.3, 2.0, 17.5]:
            assert nx.log_beta(a, 1.0) == pytest.approx(-math.log(a), abs=1e-12)
        assert nx.log_beta(2.0, 3.0) == pytest.approx(math.log(1 / 12), abs=1e-12)
        with pytest.raises(nx.DomainError):
            nx.log_beta(0.0, 1.0)

    def test_trigamma_matches_scipy_polygamma(self):
        x = np.concatenate([np.geomspace(1e-6, 1e8, 3000), np.linspace(0.5, 40, 500)])
        ref = special.polygamma(1, x)
        assert np.max(np.abs(nx.trigamma(x) / ref - 1)) < 1e-14

    def test_trigamma_against_mpmath(self):
        for x in [1e-3, 0.5, 1.0, 3.7, 9.99, 10.0, 250.0]:
            assert float(nx.trigamma(x)) == pytest.approx(float(mpmath.psi(1, x)), rel=1e-14)

    @settings(max_examples=200, deadline=None)
    @given(a=st.floats(1e-3, 1e9), k=st.one_of(st.integers(0, 500).map(float), st.floats(0, 1e6)))
    def test_log_rising_against_mpmath(self, a, k):
        with mpmath.workdps(40):
            ref = float(mpmath.loggamma(mpmath.mpf(a) + k) - mpmath.loggamma(mpmath.mpf(a)))
        # the plain gammaln difference is allowed eps * log-gamma(a + k) below the switch
        tol = 1e-14 * max(1.0, abs(ref)) + (4e-16 * abs(math.lgamma(a + k)) if a < 100 else 0.0)
        assert abs(nx.log_rising(a, k) - ref) <= tol

    def test_log_rising_large_a(self):
        # gammaln differencing is off by about 1e-8 here
        a = math.exp(16) * 1.7
        with mpmath.workdps(40):
            ref = float(mpmath.loggamma(mpmath.mpf(a) + 12) - mpmath.loggamma(mpmath.mpf(a)))
        assert nx.log_rising(a, 12.0) == pytest.approx(ref, rel=1e-15)
        assert nx.log_rising(np.array([5.0, a]), 0.0).tolist() == [0.0, 0.0]

    def test_trigamma_nonpositive_defers_to_scipy(self):
        x = np.array([-1.5, 0.0, np.nan, 2.0])
        got = nx.trigamma(x)
        ref = special.polygamma(1, x)
        np.testing.assert_array_equal(np.isnan(got), np.isnan(ref))
        ok = ~np.isnan(ref)
        np.testing.assert_allclose(got[ok], ref[ok], rtol=1e-14)


class TestRngStream:
    def test_same_stream_same_draws(self):
        a = nx.RngStream(7, (1, 2)).generator().random(5)
        b = nx.RngStream(7, (1, 2)).generator().random(5)
        np.testing.assert_array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = nx.RngStream(7, 1).generator().random(1000)
        b = nx.RngStream(7, 2).generator().random(1000)
        assert not np.array_equal(a, b)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.1

    def test_child_keys(self):
        s = nx.RngStream(3, 4)
        assert s.child(5, 6).key == (4, 5, 6)
        assert nx.RngStream(3, (4, 5)).child(6) == s.child(5, 6)

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            nx.RngStream(-1)


def _moments(dist, mean, var, n=100_000, seed=0):
    x = np.asarray(nx.sample(dist, nx.RngStream(seed, 1), n), dtype=float)
    se_mean = math.sqrt(var / n)
    assert abs(x.mean() - mean) < 4 * se_mean
    # standard error of the sample variance from the fourth central moment
    m4 = np.mean((x - x.mean()) ** 4)
    se_var = math.sqrt(max(m4 - var ** 2, 1e-300) / n)
    assert abs(x.var() - var) < 4 * se_var


class TestSampling:
    def test_bernoulli_degenerate(self):
        x = nx.sample(nx.Bernoulli(1.0), nx.RngStream(0), 1000)
        assert np.all(x == 1)

    def test_gamma_mean_million(self):
        n = 1_000_000
        x = nx.sample(nx.Gamma(2.0, 4.0), nx.RngStream(1), n)
        se = math.sqrt(2.0 / 16.0 / n)
        assert abs(x.mean() - 0.5) < 3 * se

    def test_beta_variance_million(self):
        n = 1_000_000
        x = nx.sample(nx.Beta(3.0, 3.0), nx.RngStream(2), n)
        m4 = np.mean((x - x.mean()) ** 4)
        se = math.sqrt((m4 - (1 / 28) ** 2) / n)
        assert abs(x.var() - 1 / 28) < 3 * se

    @pytest.mark.parametrize("dist,mean,var", [
        (nx.Normal(1.5, 2.0), 1.5, 4.0),
        (nx.Gamma(0.4, 2.0), 0.2, 0.1),
        (nx.Gamma(7.0, 0.5), 14.0, 28.0),
        (nx.Beta(0.7, 2.5), 0.7 / 3.2, 0.7 * 2.5 / (3.2 ** 2 * 4.2)),
        (nx.Poisson(3.2), 3.2, 3.2),
        (nx.Poisson(45.0), 45.0, 45.0),
        (nx.Binomial(12, 0.3), 3.6, 12 * 0.3 * 0.7),
        (nx.Bernoulli(0.25), 0.25, 0.1875),
    ])
    def test_moments(self, dist, mean, var):
        _moments(dist, mean, var)

    @pytest.mark.parametrize("dist", [nx.Gamma(0.0, 1.0), nx.Gamma(1.0, -1.0), nx.Beta(1.0, 0.0),
                                      nx.Poisson(-1.0), nx.Binomial(3, 1.2),
                                      nx.Binomial(2.5, 0.5), nx.Bernoulli(1.5),
                                      nx.Normal(0.0, -1.0)])
    def test_invalid_parameters(self, dist):
        with pytest.raises(nx.InvalidParameterError):
            nx.sample(dist, nx.RngStream(0))

    def test_reproducible(self):
        a = nx.sample(nx.Gamma(2.0, 1.0), nx.RngStream(9, 3), 10)
        b = nx.sample(nx.Gamma(2.0, 1.0), nx.RngStream(9, 3), 10)
        np.testing.assert_array_equal(a, b)


class TestMaximize:
    def test_quadratic(self):
        x, v = nx.maximize(lambda z: -(z[0] - 2.0) ** 2, [0.0])
        assert x[0] == pytest.approx(2.0, abs=1e-6)
        assert v == pytest.approx(0.0, abs=1e-10)

    def test_banana(self):
        f = lambda z: -(z[0] - 1) ** 2 - 10 * (z[1] - z[0] ** 2) ** 2
        x, _ = nx.maximize(f, [-1.0, 1.0], nx.OptimizerConfig(max_evals=5000))
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-4)

    def test_constant_returns_initial(self):
        x, v = nx.maximize(lambda z: 0.0, [0.3, -2.0])
        np.testing.assert_allclose(x, [0.3, -2.0])
        assert v == 0.0

    def test_budget_exhausted(self):
        f = lambda z: -(z[0] - 1) ** 2 - 10 * (z[1] - z[0] ** 2) ** 2
        with pytest.raises(nx.NonConvergenceError) as info:
            nx.maximize(f, [-1.0, 1.0], nx.OptimizerConfig(max_evals=5))
        assert info.value.best is not None

    def test_config_validation(self):
        with pytest.raises(ValueError):
            nx.OptimizerConfig(max_evals=0)
        with pytest.raises(ValueError):
            nx.OptimizerConfig(x_tol=0.0)

    @settings(max_examples=100, deadline=None)
    @given(a=st.floats(0.1, 10.0), c=st.floats(-50.0, 50.0))
    def test_concave_quadratics(self, a, c):
        cfg = nx.OptimizerConfig()
        x, _ = nx.maximize(lambda z: -a * (z[0] - c) ** 2, [0.0], cfg)
        assert abs(x[0] - c) <= 10 * cfg.x_tol * max(1.0, abs(c))
