"""Checks that the slow reference implementations are themselves right.

These are the oracles the likelihood tests lean on, so they get their
own closed-form and cross-library checks before anything trusts them.
"""

import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from semburn.data import Dataset
from semburn.likelihood import ImpliedMoments
from semburn.model import SemMatrices
from semburn.verify import (
    dense_moments,
    finite_diff_grad,
    joint_conditional,
    quadrature_marginal,
    rowwise_fiml,
)


def make_sm(
    nu=None, alpha=None, loadings=None, paths=None,
    resid_sd=None, resid_cor=None, latent_sd=None, latent_cor=None,
    p=2, m=2,
):
    return SemMatrices(
        intercepts=np.zeros(p) if nu is None else np.asarray(nu, float),
        latent_means=np.zeros(m) if alpha is None else np.asarray(alpha, float),
        loadings=np.eye(p, m) if loadings is None else np.asarray(loadings, float),
        paths=np.zeros((m, m)) if paths is None else np.asarray(paths, float),
        resid_sd=np.ones(p) if resid_sd is None else np.asarray(resid_sd, float),
        resid_cor=np.eye(p) if resid_cor is None else np.asarray(resid_cor, float),
        latent_sd=np.ones(m) if latent_sd is None else np.asarray(latent_sd, float),
        latent_cor=np.eye(m) if latent_cor is None else np.asarray(latent_cor, float),
    )


class TestDenseMoments:
    def test_decoupled_two_factor(self):
        sm = make_sm(latent_sd=np.sqrt([2.0, 3.0]))
        mom = dense_moments(sm)
        assert isinstance(mom, ImpliedMoments)
        assert np.allclose(mom.sigma, np.diag([3.0, 4.0]))
        assert mom.logdet_sigma == pytest.approx(np.log(12.0))
        assert mom.logdet_latent == pytest.approx(np.log(6.0))

    def test_path_model_mean(self):
        # eta2 = 0.5 eta1, alpha = (1, 2): E alpha = (1, 2.5)
        sm = make_sm(alpha=[1.0, 2.0], paths=[[0.0, 0.0], [0.5, 0.0]])
        mom = dense_moments(sm)
        assert np.allclose(mom.latent_mean, [1.0, 2.5])
        assert np.allclose(mom.mu, [1.0, 2.5])

    def test_indefinite_correlation_rejected(self):
        bad = np.array([[1.0, 0.95, -0.95], [0.95, 1.0, 0.95], [-0.95, 0.95, 1.0]])
        assert np.min(np.linalg.eigvalsh(bad)) < 0  # construction sanity
        sm = make_sm(p=3, m=1, loadings=np.ones((3, 1)), resid_cor=bad,
                     resid_sd=np.ones(3), latent_sd=[1.0], latent_cor=np.eye(1))
        mom = dense_moments(sm)
        assert not isinstance(mom, ImpliedMoments)

    def test_singular_ib_rejected(self):
        sm = make_sm(paths=[[0.0, 1.0], [1.0, 0.0]])
        assert not isinstance(dense_moments(sm), ImpliedMoments)


class TestRowwiseFiml:
    def test_single_standard_normal(self):
        sm = make_sm(p=1, m=0, loadings=np.zeros((1, 0)),
                     paths=np.zeros((0, 0)), latent_sd=np.zeros(0),
                     latent_cor=np.zeros((0, 0)), resid_sd=[1.0],
                     resid_cor=np.eye(1), nu=[0.0], alpha=np.zeros(0))
        mom = dense_moments(sm)
        data = Dataset(["y"], np.array([[0.0]]))
        assert rowwise_fiml(mom, data) == pytest.approx(norm.logpdf(0.0))

    def test_missing_cells_drop_coordinates(self):
        sm = make_sm(latent_sd=np.sqrt([2.0, 3.0]))
        mom = dense_moments(sm)
        data = Dataset(["a", "b"], np.array([[1.0, np.nan], [1.0, 2.0]]))
        expected = norm.logpdf(1.0, scale=np.sqrt(3.0)) + multivariate_normal.logpdf(
            [1.0, 2.0], mean=[0.0, 0.0], cov=np.diag([3.0, 4.0])
        )
        assert rowwise_fiml(mom, data) == pytest.approx(expected, abs=1e-12)


class TestQuadrature:
    def setup_method(self):
        self.sm = make_sm(
            p=3, m=1, loadings=np.array([[1.0], [0.8], [1.2]]),
            paths=np.zeros((1, 1)), latent_sd=[0.9], latent_cor=np.eye(1),
            resid_sd=[0.7, 0.8, 0.6], resid_cor=np.eye(3),
            nu=[0.1, -0.2, 0.3], alpha=[0.5],
        )
        self.row = np.array([0.4, 1.0, -0.3])

    def test_zero_loadings_reduce_to_residual_density(self):
        sm = self.sm
        sm.loadings[:] = 0.0
        direct = multivariate_normal.logpdf(self.row, mean=sm.intercepts,
                                            cov=sm.resid_cov)
        assert quadrature_marginal(sm, self.row) == pytest.approx(direct, abs=1e-10)

    def test_node_doubling_is_stable(self):
        a = quadrature_marginal(self.sm, self.row, nodes=41)
        b = quadrature_marginal(self.sm, self.row, nodes=101)
        assert abs(a - b) < 1e-8

    def test_matches_closed_form_single_factor(self):
        # analytic marginal: y ~ N(nu + lam * alpha, lam psi lam' + Theta)
        sm = self.sm
        lam = sm.loadings[:, 0]
        mu = sm.intercepts + lam * sm.latent_means[0]
        cov = np.outer(lam, lam) * sm.latent_sd[0] ** 2 + sm.resid_cov
        direct = multivariate_normal.logpdf(self.row, mean=mu, cov=cov)
        assert quadrature_marginal(sm, self.row) == pytest.approx(direct, abs=1e-9)

    def test_missing_entry_marginalized(self):
        row = np.array([0.4, np.nan, -0.3])
        sm = self.sm
        lam = sm.loadings[[0, 2], 0]
        mu = sm.intercepts[[0, 2]] + lam * sm.latent_means[0]
        cov = np.outer(lam, lam) * sm.latent_sd[0] ** 2 + np.diag(
            sm.resid_sd[[0, 2]] ** 2
        )
        direct = multivariate_normal.logpdf(row[[0, 2]], mean=mu, cov=cov)
        assert quadrature_marginal(sm, row) == pytest.approx(direct, abs=1e-9)

    def test_two_latents_refused(self):
        with pytest.raises(ValueError, match="at most one latent"):
            quadrature_marginal(make_sm(), np.zeros(2))


class TestJointConditional:
    def test_conjugate_single_factor(self):
        # lam = theta = psi = 1, y = 2: posterior N(1, 1/2)
        sm = make_sm(p=1, m=1, loadings=[[1.0]], paths=np.zeros((1, 1)),
                     latent_sd=[1.0], latent_cor=np.eye(1),
                     resid_sd=[1.0], resid_cor=np.eye(1), nu=[0.0], alpha=[0.0])
        mean, cov = joint_conditional(sm, np.array([2.0]))
        assert mean[0] == pytest.approx(1.0)
        assert cov[0, 0] == pytest.approx(0.5)

    def test_no_observations_returns_prior(self):
        sm = make_sm(latent_sd=np.sqrt([2.0, 3.0]), alpha=[1.0, -1.0])
        mean, cov = joint_conditional(sm, np.array([np.nan, np.nan]))
        assert np.allclose(mean, [1.0, -1.0])
        assert np.allclose(cov, np.diag([2.0, 3.0]))


class TestFiniteDiff:
    def test_quadratic_exact(self):
        a = np.array([[2.0, 0.3], [0.3, 1.0]])

        def f(x):
            return 0.5 * x @ a @ x

        x0 = np.array([1.5, -2.0])
        g = finite_diff_grad(f, x0)
        assert np.allclose(g, a @ x0, atol=1e-8)

    def test_relative_step_handles_large_coordinates(self):
        x0 = np.array([1e6, 1.0])
        g = finite_diff_grad(lambda x: float(np.sum(np.sin(x / 1e6))), x0)
        expected = np.cos(x0 / 1e6) / 1e6
        assert np.allclose(g, expected, rtol=1e-6)
