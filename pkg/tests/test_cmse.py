from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fh_oracle as fo
from eubayes import cmse, em, sim
from eubayes import numerics as nx
from eubayes.family import (BINOMIAL_BETA as BB, FAY_HERRIOT as FH, POISSON_GAMMA as PG,
                            AreaData, AreaRecord, ModelParams)


def fh_closures(y, n, x):
    Y, N, X = np.array([[y]]), np.array([[n]]), np.array([[x]])
    mu, r1f, ll = cmse.area_functions(FH, Y, N, X)
    return (lambda phi: mu(phi)[:, 0]), (lambda phi: r1f(phi)[:, 0]), (lambda phi: ll(phi)[:, 0])


class TestR1:
    @pytest.mark.parametrize("kind", [FH, PG, BB])
    def test_p_one(self, kind):
        par = ModelParams([0.2], 3.0, 1.0)
        rec = AreaRecord(0.4, 10.0, [1.0])
        m = float(kind.mean(0.2))
        eta = (10 * 0.4 + 3 * m) / 13
        assert cmse.r1(rec, par, kind) == pytest.approx(kind.variance_fn(eta) / (13 - kind.v2))

    @pytest.mark.parametrize("kind", [FH, PG, BB])
    def test_zero_residual(self, kind):
        par = ModelParams([math.log(0.4) if kind is PG else (math.log(0.4 / 0.6) if kind is BB else 0.4)],
                          3.0, 0.3)
        rec = AreaRecord(0.4, 10.0, [1.0])
        from eubayes.shrinkage import responsibility
        r = responsibility(rec, par, kind)
        assert cmse.r1(rec, par, kind) == pytest.approx(r * kind.variance_fn(0.4) / (13 - kind.v2))

    def test_pg_reference_by_sampling(self):
        rec, par = AreaRecord(2.0, 10.0, [0.0]), ModelParams([0.0], 5.0, 0.5)
        from test_shrinkage import two_stage_draws
        mu = two_stage_draws(PG, rec, par, 1_000_000, 3)
        v = cmse.r1(rec, par, PG)
        m4 = np.mean((mu - mu.mean()) ** 4)
        se = math.sqrt((m4 - mu.var() ** 2) / mu.size)
        assert abs(mu.var() - v) < 4 * se


class TestStencils:
    def test_linear_exact(self):
        a = np.array([1.5, -2.0, 0.25])
        f = lambda phi: phi @ a
        for z in [1e-3, 0.1, 1.0]:
            np.testing.assert_allclose(cmse.numeric_grad(f, np.array([0.3, 1.0, 2.0]), z=z), a, rtol=1e-10)

    def test_symmetric_minimum(self):
        f = lambda phi: (phi[:, 1] - 3.0) ** 2
        g = cmse.numeric_grad(f, np.array([0.0, 3.0, 0.5]), z=0.01)
        assert g[1] == 0.0

    def test_quadratic_hessian(self):
        M = np.array([[2.0, 0.5, -1.0], [0.5, 1.0, 0.3], [-1.0, 0.3, 4.0]])
        f = lambda phi: np.einsum("ri,ij,rj->r", phi, M, phi)
        H = cmse.numeric_hess(f, np.array([0.4, -0.2, 1.1]), z=0.01)
        np.testing.assert_allclose(H, 2 * M, atol=1e-7)

    def test_separable_cross_partial(self):
        f = lambda phi: np.sin(phi[:, 0]) + np.exp(phi[:, 1])
        H = cmse.numeric_hess(f, np.array([0.4, -0.2]), z=1e-3)
        assert abs(H[0, 1]) < 1e-6

    def test_batch_shapes(self):
        f = lambda phi: np.stack([phi[:, 0] ** 2, phi[:, 1]], axis=1)
        at = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, 1.0]])
        assert cmse.numeric_grad(f, at, z=1e-3).shape == (3, 2, 2)
        assert cmse.numeric_hess(f, at, z=1e-3).shape == (3, 2, 2, 2)

    def test_step_shrinks_at_boundary(self):
        valid = cmse.valid_region(PG, 1)
        at = np.array([[0.0, 5.0, 0.001]])
        steps = cmse._steps(at, 0.01, valid)
        assert steps[0, 2] < 0.001 and steps[0, 0] == 0.01

    def test_step_error(self):
        with pytest.raises(cmse.DerivativeError):
            cmse.numeric_grad(lambda phi: phi[:, 0], np.array([0.0, 5.0, 0.0]),
                              valid=cmse.valid_region(PG, 1), z=0.01)

    def test_derivative_center(self):
        c = cmse.derivative_center(np.array([[0.1, 5.0, 1.0]]), 1, None, 0.01)
        assert c[0, 2] == pytest.approx(0.98)
        c = cmse.derivative_center(np.array([[0.1, 5.0]]), 1, 1.0, 0.01)
        assert c.shape == (1, 2)

    def test_hand_gradient_matches_mpmath(self):
        g = np.random.default_rng(0)
        for _ in range(5):
            y, n, x, phi = fo.random_instance(g)
            np.testing.assert_allclose(fo.mu_tilde_grad(y, n, x, phi),
                                       fo.mp_grad(fo.mp_mu_tilde, y, n, x, phi), rtol=1e-9, atol=1e-12)

    def test_fh_gradient_order(self):
        # central differences: error scales as z**2
        g = np.random.default_rng(1)
        ratios = []
        for _ in range(10):
            y, n, x, phi = fo.random_instance(g)
            mu, _, _ = fh_closures(y, n, x)
            exact = fo.mu_tilde_grad(y, n, x, phi)
            z = 50 ** -1.25
            e1 = np.max(np.abs(cmse.numeric_grad(mu, phi, z=z) - exact))
            e2 = np.max(np.abs(cmse.numeric_grad(mu, phi, z=z / 2) - exact))
            assert e1 < 1e-3
            ratios.append(e2 / e1)
        assert 0.2 < np.median(ratios) < 0.3

    def test_fh_hessian_against_mpmath(self):
        g = np.random.default_rng(2)
        for _ in range(5):
            y, n, x, phi = fo.random_instance(g)
            _, r1f, _ = fh_closures(y, n, x)
            H = cmse.numeric_hess(r1f, phi, z=50 ** -1.25)
            ref = fo.mp_hess(fo.mp_r1, y, n, x, phi)
            assert np.max(np.abs(H - ref)) < 1e-3 * max(1.0, np.max(np.abs(ref)))


class TestUncertainty:
    def test_identical_refits(self):
        phi_hat = np.array([0.1, 5.0, 0.5])
        star = np.array([[0.2, 6.0, 0.4], [0.2, 6.0, 0.4]])
        u = cmse.uncertainty_from_draws(star, phi_hat, "natural")
        dev = star[0] - phi_hat
        assert np.linalg.matrix_rank(u.omega, tol=1e-12) <= 1
        np.testing.assert_allclose(u.bias, dev)
        np.testing.assert_allclose(u.omega, np.outer(dev, dev))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), B=st.integers(2, 60),
           scale=st.sampled_from(["working", "natural"]))
    def test_omega_psd(self, seed, B, scale):
        g = np.random.default_rng(seed)
        phi_hat = np.array([g.normal(), math.exp(g.normal()), g.uniform(0.01, 0.99)])
        star = np.column_stack([g.normal(size=B), np.exp(g.normal(size=B)), g.uniform(0, 1, B)])
        u = cmse.uncertainty_from_draws(star, phi_hat, scale)
        np.testing.assert_array_equal(u.omega, u.omega.T)
        assert np.linalg.eigvalsh(u.omega).min() >= -1e-12 * max(1.0, np.abs(u.omega).max())

    def test_working_delta_method(self):
        # nu* = nu_hat exp(d): Omega_nunu = nu_hat^2 var(d)
        phi_hat = np.array([0.0, 4.0, 0.5])
        d = np.array([-0.1, 0.1])
        star = np.column_stack([[0.0, 0.0], 4.0 * np.exp(d), [0.5, 0.5]])
        u = cmse.uncertainty_from_draws(star, phi_hat, "working")
        assert u.omega[1, 1] == pytest.approx(16 * 0.01)
        assert u.bias[1] == pytest.approx(0.5 * 4.0 * 0.01)

    def test_too_few(self):
        with pytest.raises(cmse.BootstrapError):
            cmse.uncertainty_from_draws(np.zeros((1, 3)), np.zeros(3))

    def _pg_data(self, m, seed):
        design = sim.CmseEvalDesign(m=m, seed=seed)
        y, n, X = sim._eval_data(design, sim._TRUTH_DATA, 0, 1)
        return AreaData(y[0], n[0], X[0])

    def test_bootstrap_deterministic(self):
        d = self._pg_data(30, 1)
        fit = em.fit_em(d, PG)
        a = cmse.bootstrap_uncertainty(d, fit.params, PG, 8, rng=nx.RngStream(4))
        b = cmse.bootstrap_uncertainty(d, fit.params, PG, 8, rng=nx.RngStream(4))
        np.testing.assert_array_equal(a.omega, b.omega)
        np.testing.assert_array_equal(a.draws, b.draws)
        assert a.boot_count + a.dropped == 8

    def test_bootstrap_failure(self):
        d = self._pg_data(30, 1)
        fit = em.fit_em(d, PG)
        with pytest.raises(cmse.BootstrapError):
            cmse.bootstrap_uncertainty(d, fit.params, PG, 5, em.FitConfig(max_iter=1, tol=1e-14),
                                       rng=nx.RngStream(4))

    def test_omega_scales_with_m(self):
        # intercept-only PG, 50 outer replicates: Omega_beta roughly halves as m doubles
        cfg = em.FitConfig(max_iter=5000)
        med = {}
        for m in (50, 100):
            design = sim.CmseEvalDesign(m=m, seed=21)
            y, n, X = sim._eval_data(design, sim._TRUTH_DATA, 0, 50)
            fit = em.fit_em_batch(PG, y, n, X, cfg)
            phi, ok, _ = cmse.bootstrap_batch(PG, n, X, fit.beta, fit.nu, fit.p, 30, cfg,
                                              [nx.RngStream(22, (m, i)) for i in range(50)])
            om = [cmse.uncertainty_from_draws(phi[i][ok[i]], fit.phi()[i], "natural").omega[0, 0]
                  for i in range(50)]
            med[m] = np.median(om)
        assert 1.4 < med[50] / med[100] < 2.8


def _fh_setup(seed):
    g = np.random.default_rng(seed)
    y, n, x, phi = fo.random_instance(g)
    A = g.normal(size=(4, 4)) * 0.05
    omega = A @ A.T
    bias = g.normal(size=4) * 0.01
    rec = AreaRecord(y, n, x)
    par = ModelParams(phi[:2], phi[2], phi[3])
    return y, n, x, phi, rec, par, omega, bias


class TestComponents:
    def test_r2_zero(self):
        _, _, _, _, rec, par, _, _ = _fh_setup(0)
        assert cmse.r2(rec, par, np.zeros((4, 4)), FH, m=50) == 0.0

    def test_r2_scalar_case(self):
        rec = AreaRecord(0.4, 10.0, [1.0])
        par = ModelParams([0.1], 3.0, 1.0)
        z = 50 ** -1.25
        mu, _, _ = cmse.area_functions(FH, np.array([[0.4]]), np.array([[10.0]]), np.ones((1, 1, 1)), 1.0)
        g1 = cmse.numeric_grad(lambda phi: mu(phi)[:, 0], np.array([0.1, 3.0]), z=z)[0]
        omega = np.diag([0.7, 0.0])
        assert cmse.r2(rec, par, omega, FH, p_fixed=1.0, m=50) == pytest.approx(0.7 * g1 ** 2)

    def test_r2_fh_oracle(self):
        for seed in range(5):
            y, n, x, phi, rec, par, omega, _ = _fh_setup(seed)
            g = fo.mu_tilde_grad(y, n, x, phi)
            assert cmse.r2(rec, par, omega, FH, m=50) == pytest.approx(g @ omega @ g, rel=1e-3, abs=1e-9)

    def test_b_zero(self):
        _, _, _, _, rec, par, _, _ = _fh_setup(0)
        unc = cmse.UncertaintyEstimates.zero(4)
        assert cmse.bias_b(rec, par, unc, FH, m=50) == 0.0

    def test_b_cancellation(self):
        y, n, x, phi, rec, par, omega, _ = _fh_setup(3)
        cfg = cmse.DerivativeConfig(50 ** -1.25)
        c = cmse.cmse_estimate(rec, par, cmse.UncertaintyEstimates.zero(4), FH, cfg)
        unc = cmse.UncertaintyEstimates(omega, omega @ c.score, 50)
        _, r1f, _ = fh_closures(y, n, x)
        H = cmse.numeric_hess(r1f, phi, z=cfg.z)
        assert cmse.bias_b(rec, par, unc, FH, cfg) == pytest.approx(0.5 * np.trace(H @ omega), rel=1e-10, abs=1e-15)
        # with the opposite expansion it is B = -Omega L that cancels
        unc = cmse.UncertaintyEstimates(omega, -omega @ c.score, 50)
        plus = cmse.DerivativeConfig(cfg.z, score_sign=1.0)
        assert cmse.bias_b(rec, par, unc, FH, plus) == pytest.approx(0.5 * np.trace(H @ omega), rel=1e-10, abs=1e-15)

    def test_b_fh_oracle(self):
        for seed in range(5):
            y, n, x, phi, rec, par, omega, bias = _fh_setup(seed)
            gr = fo.mp_grad(fo.mp_r1, y, n, x, phi)
            L = fo.mp_grad(fo.mp_loglik, y, n, x, phi)
            H = fo.mp_hess(fo.mp_r1, y, n, x, phi)
            ref = gr @ (bias - omega @ L) + 0.5 * np.trace(H @ omega)
            got = cmse.bias_b(rec, par, cmse.UncertaintyEstimates(omega, bias, 50), FH, m=50)
            assert got == pytest.approx(ref, rel=1e-3, abs=1e-7)

    def test_no_uncertainty(self):
        rec, par = AreaRecord(2.0, 10.0, [1.0]), ModelParams([0.0], 5.0, 0.5)
        c = cmse.cmse_estimate(rec, par, cmse.UncertaintyEstimates.zero(3), PG, m=50)
        assert c.cm_hat == c.cm_naive == c.r1 == pytest.approx(cmse.r1(rec, par, PG), rel=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_algebra(self, seed):
        y, n, x, phi, rec, par, omega, bias = _fh_setup(seed)
        c = cmse.cmse_estimate(rec, par, cmse.UncertaintyEstimates(omega, bias, 50), FH, m=50)
        assert c.cm_hat - c.cm_naive == pytest.approx(c.r2 - c.b, abs=1e-14)
        assert c.negative == (c.cm_hat < 0)

    def test_table_and_csv(self, tmp_path):
        d = AreaData([0.2, 1.3, 0.7], [10.0, 10.0, 10.0], np.ones((3, 1)))
        par = ModelParams([0.0], 5.0, 0.5)
        unc = cmse.UncertaintyEstimates(np.diag([0.01, 1.0, 0.01]), np.zeros(3), 10)
        tab = cmse.cmse_table(d, par, unc, PG)
        for i in range(3):
            c = cmse.cmse_estimate(d.record(i), par, unc, PG, m=3)
            assert tab["cm_hat"][i] == pytest.approx(c.cm_hat, rel=1e-12)
        cmse.write_cmse_csv(tmp_path / "c.csv", d.area_ids, tab)
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0].split(",") == cmse.CMSE_COLUMNS and len(lines) == 4

    def test_fixed_p(self):
        rec, par = AreaRecord(2.0, 10.0, [1.0]), ModelParams([0.0], 5.0, 1.0)
        unc = cmse.UncertaintyEstimates(np.diag([0.01, 1.0]), np.zeros(2), 10)
        c = cmse.cmse_estimate(rec, par, unc, PG, p_fixed=1.0, m=50)
        assert np.isfinite(c.cm_hat) and c.score.shape == (2,)
