"""Slow reference implementations used only by the test suite.

Everything here recomputes quantities the fast paths produce, using the
most naive formulation available: general matrix inverses, explicit
log-determinants, per-row density loops, numerical quadrature, and
finite differences.  None of it shares logic with the production code
beyond basic numpy primitives, which is the point.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal, norm

from .data import Dataset
from .likelihood import REJECT, ImpliedMoments
from .model import SemMatrices

__all__ = [
    "dense_moments",
    "rowwise_fiml",
    "quadrature_marginal",
    "joint_conditional",
    "finite_diff_grad",
]

_PD_EIG_MIN = 0.0


def _is_pd(a: np.ndarray) -> bool:
    if a.shape[0] == 0:
        return True
    return bool(np.min(np.linalg.eigvalsh(a)) > _PD_EIG_MIN)


def dense_moments(sm: SemMatrices):
    """Implied moments computed verbatim, with no structure shortcuts.

    Rejects on the same conditions as the fast path: indefinite
    correlation blocks, numerically singular I - B, non-PD Sigma.
    """
    m = sm.latent_sd.shape[0]
    if not _is_pd(sm.resid_cor) or not _is_pd(sm.latent_cor):
        return REJECT
    theta = sm.resid_cov
    psi = sm.latent_cov

    a = np.eye(m) - sm.paths
    if m > 0:
        if np.linalg.cond(a, 1) > 1e12:
            return REJECT
        e_mat = np.linalg.inv(a)
    else:
        e_mat = np.zeros((0, 0))

    latent_mean = e_mat @ sm.latent_means
    latent_cov = e_mat @ psi @ e_mat.T
    if m > 0:
        sign, val = np.linalg.slogdet(latent_cov)
        logdet_latent = float(val) if sign > 0 else -np.inf
    else:
        logdet_latent = 0.0

    loadings_total = sm.loadings @ e_mat
    sigma = loadings_total @ psi @ loadings_total.T + theta
    sigma = 0.5 * (sigma + sigma.T)
    if not _is_pd(sigma):
        return REJECT
    sign, logdet_sigma = np.linalg.slogdet(sigma)
    mu = sm.intercepts + loadings_total @ sm.latent_means

    return ImpliedMoments(
        mu=mu, sigma=sigma, logdet_sigma=float(logdet_sigma),
        chol_sigma=np.linalg.cholesky(sigma),
        latent_mean=latent_mean, latent_cov=latent_cov,
        logdet_latent=logdet_latent, e_mat=e_mat,
        loadings_total=loadings_total,
    )


def rowwise_fiml(mom: ImpliedMoments, dataset: Dataset) -> float:
    """Per-row full-information log-likelihood, no pattern grouping."""
    total = 0.0
    for row in dataset.values:
        o = np.flatnonzero(~np.isnan(row))
        total += float(
            multivariate_normal.logpdf(
                row[o], mean=mom.mu[o], cov=mom.sigma[np.ix_(o, o)]
            )
        )
    return total


def quadrature_marginal(sm: SemMatrices, y_row: np.ndarray, nodes: int = 41) -> float:
    """Gauss-Hermite marginalization of a single latent variable.

    Only defined for m <= 1.  For m = 0 the latent integrates away
    trivially and the density is N(nu, Theta) on the observed entries.
    The grid is centered on the latent posterior (via joint-normal
    conditioning) so the integrand is resolved at any node count.
    """
    m = sm.latent_sd.shape[0]
    if m > 1:
        raise ValueError("quadrature oracle handles at most one latent variable")
    y_row = np.asarray(y_row, dtype=float)
    o = np.flatnonzero(~np.isnan(y_row))
    y_o = y_row[o]
    theta_oo = sm.resid_cov[np.ix_(o, o)]
    nu_o = sm.intercepts[o]

    if m == 0:
        return float(multivariate_normal.logpdf(y_o, mean=nu_o, cov=theta_oo))

    # with one latent variable, B is forced to zero by its fixed diagonal
    mu_eta = float(sm.latent_means[0])
    sd_eta = float(sm.latent_sd[0])
    lam_o = sm.loadings[o, 0]
    post_mean, post_cov = joint_conditional(sm, y_row)
    center = float(post_mean[0])
    scale = float(np.sqrt(post_cov[0, 0]))
    t_nodes, w_nodes = np.polynomial.hermite.hermgauss(nodes)
    log_vals = np.empty(nodes)
    for i, t in enumerate(t_nodes):
        eta = center + np.sqrt(2.0) * scale * t
        log_vals[i] = (
            multivariate_normal.logpdf(y_o, mean=nu_o + lam_o * eta, cov=theta_oo)
            + norm.logpdf(eta, loc=mu_eta, scale=sd_eta)
        )
    # substitution eta = center + sqrt(2) scale t puts exp(t^2) back in
    return float(
        logsumexp(np.log(w_nodes) + t_nodes**2 + log_vals)
        + 0.5 * np.log(2.0) + np.log(scale)
    )


def joint_conditional(sm: SemMatrices, y_row: np.ndarray):
    """Latent posterior moments by conditioning the joint normal.

    Returns (mean, cov) of eta given the observed entries of ``y_row``,
    derived from the joint distribution of (y, eta) with plain dense
    linear algebra.
    """
    m = sm.latent_sd.shape[0]
    e_mat = np.linalg.inv(np.eye(m) - sm.paths)
    psi_total = e_mat @ sm.latent_cov @ e_mat.T
    mu_eta = e_mat @ sm.latent_means
    lt = sm.loadings @ e_mat
    mu_y = sm.intercepts + lt @ sm.latent_means
    c_yy = lt @ sm.latent_cov @ lt.T + sm.resid_cov
    c_y_eta = sm.loadings @ psi_total  # cov(y, eta) = Lambda cov(eta)

    y_row = np.asarray(y_row, dtype=float)
    o = np.flatnonzero(~np.isnan(y_row))
    c_oo = c_yy[np.ix_(o, o)]
    gain = np.linalg.solve(c_oo, c_y_eta[o]).T  # (m, k)
    mean = mu_eta + gain @ (y_row[o] - mu_y[o])
    cov = psi_total - gain @ c_y_eta[o]
    return mean, 0.5 * (cov + cov.T)


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences with a relative step per coordinate."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        step = h * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += step
        xm[k] -= step
        g[k] = (f(xp) - f(xm)) / (2.0 * step)
    return g
