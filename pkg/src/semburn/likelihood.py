"""Marginal and conditional log-likelihoods with analytic gradients.

The marginal likelihood integrates the latent variables out of the
model, leaving a multivariate normal over the observed variables with

    mu    = nu + Lambda (I - B)^-1 alpha
    Sigma = Lambda (I - B)^-1 Psi (I - B)^-T Lambda^T + Theta.

Structure is exploited where the model allows it: a recursive (acyclic)
path matrix B is nilpotent, so (I - B)^-1 is the finite Neumann sum
I + B + ... + B^(m-1) and det(I - B) = 1; a diagonal Psi makes the
latent log-determinant a sum of logs.  Missing data are handled by
full-information evaluation over missingness-pattern groups using each
group's sufficient statistics.

Invalid covariance proposals (indefinite correlation blocks, singular
I - B, a Sigma that fails its Cholesky) yield the REJECT sentinel
rather than an exception, so a sampler can score them as zero density
and move on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .data import Dataset, PatternGroup, group_patterns
from .model import (
    MatrixTemplates,
    SemMatrices,
    StructureFlags,
    analyze_structure,
    assemble,
    gather_free,
)
from .priors import PriorSet, Transforms, log_prior_grad

__all__ = [
    "REJECT",
    "ImpliedMoments",
    "LikelihoodValue",
    "ModelContext",
    "MlResult",
    "implied_moments",
    "marginal_loglik",
    "conditional_loglik",
    "posterior_logp_grad",
    "loglik_grad",
    "maximize_marginal_loglik",
    "conditional_dim",
]

_LOG_2PI = float(np.log(2.0 * np.pi))
_RCOND_MIN = 1e-12


class _Reject:
    """Zero-density marker for invalid covariance proposals.

    ``reason`` names the matrix that failed, for diagnostics; density
    code treats every instance the same (zero density).
    """

    __slots__ = ("reason",)

    def __init__(self, reason: str = ""):
        self.reason = reason

    def __repr__(self):
        return f"REJECT[{self.reason}]" if self.reason else "REJECT"

    def __bool__(self):
        return False


REJECT = _Reject()


@dataclass
class ImpliedMoments:
    """Marginal mean and covariance plus the latent-structure cache."""

    mu: np.ndarray                # (p,)
    sigma: np.ndarray             # (p, p)
    logdet_sigma: float
    chol_sigma: np.ndarray        # (p, p) lower triangular
    latent_mean: np.ndarray       # (m,)  (I - B)^-1 alpha
    latent_cov: np.ndarray        # (m, m)  total latent covariance
    logdet_latent: float          # -inf when the latent covariance is singular
    e_mat: np.ndarray             # (m, m)  (I - B)^-1
    loadings_total: np.ndarray    # (p, m)  Lambda (I - B)^-1


@dataclass
class LikelihoodValue:
    """A log density that may be the REJECT sentinel instead of a number."""

    logp: float | _Reject
    gradient: np.ndarray | None = None

    @property
    def rejected(self) -> bool:
        return isinstance(self.logp, _Reject)


_REJECTED = LikelihoodValue(REJECT)


def _chol_or_none(a: np.ndarray) -> np.ndarray | None:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None


def _neumann_inverse(b: np.ndarray) -> np.ndarray:
    """(I - B)^-1 for nilpotent B, as the exact finite Neumann sum."""
    m = b.shape[0]
    e = np.eye(m)
    term = np.eye(m)
    for _ in range(m - 1):
        term = term @ b
        if not term.any():
            break
        e = e + term
    return e


def implied_moments(sm: SemMatrices, flags: StructureFlags):
    """Marginal moments for one parameter draw, or REJECT.

    REJECT covers: an indefinite residual or latent correlation block,
    a (numerically) singular I - B, and a Sigma whose Cholesky fails.
    """
    p = sm.intercepts.shape[0]
    m = sm.latent_sd.shape[0]

    if flags.theta_diagonal:
        theta = np.diag(sm.resid_sd**2)
    else:
        if _chol_or_none(sm.resid_cor) is None:
            return _Reject("theta correlation not positive definite")
        theta = sm.resid_cov

    if flags.psi_diagonal:
        psi = np.diag(sm.latent_sd**2)
    else:
        if _chol_or_none(sm.latent_cor) is None:
            return _Reject("psi correlation not positive definite")
        psi = sm.latent_cov

    if m == 0:
        e_mat = np.zeros((0, 0))
    elif flags.b_recursive:
        e_mat = _neumann_inverse(sm.paths)
    else:
        a = np.eye(m) - sm.paths
        try:
            e_mat = np.linalg.inv(a)
        except np.linalg.LinAlgError:
            return _Reject("I-B singular")
        rcond = 1.0 / (np.linalg.norm(a, 1) * np.linalg.norm(e_mat, 1))
        if not np.isfinite(rcond) or rcond < _RCOND_MIN:
            return _Reject("I-B singular")

    latent_mean = e_mat @ sm.latent_means
    latent_cov = e_mat @ psi @ e_mat.T
    if flags.b_recursive and flags.psi_diagonal:
        # det(I - B) = 1, so the latent covariance determinant is the
        # product of the psi diagonal
        with np.errstate(divide="ignore"):
            logdet_latent = float(np.sum(np.log(sm.latent_sd**2)))
    elif m > 0:
        sign, val = np.linalg.slogdet(latent_cov)
        logdet_latent = float(val) if sign > 0 else -np.inf
    else:
        logdet_latent = 0.0

    loadings_total = sm.loadings @ e_mat
    sigma = loadings_total @ psi @ loadings_total.T + theta
    chol = _chol_or_none(sigma)
    if chol is None:
        return _Reject("sigma not positive definite")
    logdet_sigma = 2.0 * float(np.sum(np.log(np.diag(chol))))
    mu = sm.intercepts + loadings_total @ sm.latent_means

    return ImpliedMoments(
        mu=mu, sigma=sigma, logdet_sigma=logdet_sigma, chol_sigma=chol,
        latent_mean=latent_mean, latent_cov=latent_cov,
        logdet_latent=logdet_latent, e_mat=e_mat,
        loadings_total=loadings_total,
    )


def _marginal_core(mom: ImpliedMoments, groups: list[PatternGroup], want_grads: bool):
    """Pattern-grouped logp, optionally with moment-space gradients.

    Returns (logp, g_mu, g_sigma) or None when a pattern submatrix of
    Sigma fails its Cholesky.
    """
    p = mom.mu.shape[0]
    logp = 0.0
    g_mu = np.zeros(p) if want_grads else None
    g_sigma = np.zeros((p, p)) if want_grads else None
    eye_cache = np.eye(p)
    for g in groups:
        k = g.k
        if k == p:
            chol = mom.chol_sigma
            logdet = mom.logdet_sigma
        else:
            chol = _chol_or_none(mom.sigma[g._grid])
            if chol is None:
                return None
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        d = g.mean - mom.mu[g.observed_idx]
        m_mat = g.scatter + g.count * np.outer(d, d)
        a_inv = cho_solve((chol, True), eye_cache[:k, :k], check_finite=False)
        quad = float(np.sum(a_inv * m_mat))
        logp -= 0.5 * (g.count * (k * _LOG_2PI + logdet) + quad)
        if want_grads:
            g_mu[g.observed_idx] += g.count * (a_inv @ d)
            g_sigma[g._grid] += 0.5 * (a_inv @ m_mat @ a_inv - g.count * a_inv)
    return logp, g_mu, g_sigma


def marginal_loglik(
    mom: ImpliedMoments, groups: list[PatternGroup], per_row: bool = False
) -> LikelihoodValue:
    """Full-information marginal log-likelihood over pattern groups.

    ``per_row`` evaluates each data row's density individually instead
    of using the groups' sufficient statistics; it exists for oracle
    comparisons and is substantially slower.
    """
    if not per_row:
        core = _marginal_core(mom, groups, want_grads=False)
        if core is None:
            return _REJECTED
        return LikelihoodValue(core[0])

    p = mom.mu.shape[0]
    logp = 0.0
    for g in groups:
        k = g.k
        if k == p:
            chol = mom.chol_sigma
            logdet = mom.logdet_sigma
        else:
            chol = _chol_or_none(mom.sigma[g._grid])
            if chol is None:
                return _REJECTED
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        resid = g.values - mom.mu[g.observed_idx]
        z = solve_triangular(chol, resid.T, lower=True, check_finite=False)
        logp -= 0.5 * (g.count * (k * _LOG_2PI + logdet) + float(np.sum(z * z)))
    return LikelihoodValue(logp)


def conditional_loglik(
    sm: SemMatrices,
    eta: np.ndarray,
    groups: list[PatternGroup],
    flags: StructureFlags,
) -> LikelihoodValue:
    """Log-likelihood conditional on supplied latent values.

    ``eta`` is (n, m) in original row order; each group's ``row_indices``
    pick out its rows.  The latent density uses the recursive-B and
    diagonal-Psi shortcuts when the flags allow: with B nilpotent the
    quadratic form collapses to ((I - B) eta - alpha) / psi and the
    log-determinant to a sum of logs.
    """
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    m = sm.latent_sd.shape[0]
    n = eta.shape[0]

    obs = _conditional_observed_part(sm, eta, groups, flags, want_grads=False)
    if obs is None:
        return _REJECTED
    logp = obs[0]

    if m == 0:
        return LikelihoodValue(logp)

    if flags.b_recursive and flags.psi_diagonal:
        psi_diag = sm.latent_sd**2
        if np.any(psi_diag <= 0):
            return _REJECTED
        r = eta @ (np.eye(m) - sm.paths).T - sm.latent_means
        quad = float(np.sum(r * r / psi_diag))
        logdet = float(np.sum(np.log(psi_diag)))
    else:
        if flags.b_recursive:
            e_mat = _neumann_inverse(sm.paths)
        else:
            a = np.eye(m) - sm.paths
            try:
                e_mat = np.linalg.inv(a)
            except np.linalg.LinAlgError:
                return _REJECTED
            rcond = 1.0 / (np.linalg.norm(a, 1) * np.linalg.norm(e_mat, 1))
            if not np.isfinite(rcond) or rcond < _RCOND_MIN:
                return _REJECTED
        cov = e_mat @ sm.latent_cov @ e_mat.T
        chol = _chol_or_none(cov)
        if chol is None:
            return _REJECTED
        resid = eta - e_mat @ sm.latent_means
        z = solve_triangular(chol, resid.T, lower=True, check_finite=False)
        quad = float(np.sum(z * z))
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    logp -= 0.5 * (n * (m * _LOG_2PI + logdet) + quad)
    return LikelihoodValue(logp)


def _conditional_observed_part(sm, eta, groups, flags, want_grads):
    """sum_i log N(y_i,obs; nu_o + Lambda_o eta_i, Theta_oo).

    Returns None on REJECT; otherwise (logp,) or
    (logp, g_nu, g_lambda, g_eta, g_theta_full).
    """
    p = sm.intercepts.shape[0]
    logp = 0.0
    if want_grads:
        g_nu = np.zeros(p)
        g_lambda = np.zeros_like(sm.loadings)
        g_eta = np.zeros_like(eta)
        g_theta = np.zeros((p, p))
    if not flags.theta_diagonal and _chol_or_none(sm.resid_cor) is None:
        return None
    theta_full = None if flags.theta_diagonal else sm.resid_cov
    for g in groups:
        o = g.observed_idx
        lam_o = sm.loadings[o]
        eta_g = eta[g.row_indices]
        resid = g.values - sm.intercepts[o] - eta_g @ lam_o.T
        if flags.theta_diagonal:
            var_o = sm.resid_sd[o] ** 2
            if np.any(var_o <= 0):
                return None
            u = resid / var_o
            logdet = float(np.sum(np.log(var_o)))
            theta_inv = np.diag(1.0 / var_o) if want_grads else None
        else:
            chol = _chol_or_none(theta_full[g._grid])
            if chol is None:
                return None
            u = cho_solve((chol, True), resid.T, check_finite=False).T
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            if want_grads:
                theta_inv = cho_solve((chol, True), np.eye(g.k), check_finite=False)
        quad = float(np.sum(resid * u))
        logp -= 0.5 * (g.count * (g.k * _LOG_2PI + logdet) + quad)
        if want_grads:
            g_nu[o] += u.sum(axis=0)
            g_lambda[o] += u.T @ eta_g
            g_eta[g.row_indices] += u @ lam_o
            g_theta[g._grid] += 0.5 * (u.T @ u - g.count * theta_inv)
    if want_grads:
        return logp, g_nu, g_lambda, g_eta, g_theta
    return (logp,)


@dataclass
class ModelContext:
    """Everything a log-density evaluation needs, bundled once."""

    templates: MatrixTemplates
    flags: StructureFlags
    groups: list[PatternGroup]
    dataset: Dataset
    priors: PriorSet
    transforms: Transforms

    @classmethod
    def build(
        cls,
        templates: MatrixTemplates,
        dataset: Dataset,
        priors: PriorSet,
        simplify: bool = True,
    ) -> "ModelContext":
        if simplify:
            flags = analyze_structure(templates)
        else:
            flags = StructureFlags(False, False, False, None)
        return cls(
            templates=templates,
            flags=flags,
            groups=group_patterns(dataset),
            dataset=dataset,
            priors=priors,
            transforms=Transforms(templates.param_classes),
        )

    @property
    def n_free(self) -> int:
        return self.templates.n_free


def conditional_dim(ctx: ModelContext) -> int:
    """Sampling-space dimension in conditional mode (free + latent noise)."""
    return ctx.templates.n_free + ctx.dataset.n * ctx.templates.m


def _free_gradient(t, sm, mom, g_mu, g_sigma):
    """Chain moment-space gradients down to the free parameter vector."""
    lt = mom.loadings_total
    e = mom.e_mat
    alpha = sm.latent_means
    psi_full = sm.latent_cov

    g_lt = np.outer(g_mu, alpha) + 2.0 * (g_sigma @ lt @ psi_full)
    g_lambda = g_lt @ e.T
    g_b = e.T @ (sm.loadings.T @ g_lt) @ e.T
    g_alpha = lt.T @ g_mu
    g_psi_full = lt.T @ g_sigma @ lt

    s_t, r_t = sm.resid_sd, sm.resid_cor
    s_p, r_p = sm.latent_sd, sm.latent_cor
    grads = {
        "intercepts": g_mu,
        "latent_means": g_alpha,
        "loadings": g_lambda,
        "paths": g_b,
        "resid_sd": 2.0 * ((g_sigma * r_t) @ s_t),
        "resid_cor": 2.0 * (s_t[:, None] * g_sigma * s_t[None, :]),
        "latent_sd": 2.0 * ((g_psi_full * r_p) @ s_p),
        "latent_cor": 2.0 * (s_p[:, None] * g_psi_full * s_p[None, :]),
    }
    return gather_free(t, grads)


def _marginal_value_grad(ctx: ModelContext, c: np.ndarray):
    """(logp, constrained-scale gradient) of the marginal loglik, or None."""
    sm = assemble(ctx.templates, c)
    mom = implied_moments(sm, ctx.flags)
    if isinstance(mom, _Reject):
        return None
    core = _marginal_core(mom, ctx.groups, want_grads=True)
    if core is None:
        return None
    logp, g_mu, g_sigma = core
    return logp, _free_gradient(ctx.templates, sm, mom, g_mu, g_sigma)


def _phi_half_diag(x: np.ndarray) -> np.ndarray:
    """Strictly-lower part plus half the diagonal (Cholesky differential map)."""
    out = np.tril(x)
    np.fill_diagonal(out, 0.5 * np.diag(x))
    return out


def _psi_chol_with_grads(sm, flags, g_chol):
    """Gradients of a function of L = chol(Psi) wrt psi sds/correlations.

    ``g_chol`` is d(logp)/dL.  Diagonal Psi admits L = diag(sd) with
    zeros allowed; otherwise each parameter's dPsi is pushed through the
    forward-mode Cholesky differential dL = L phi(L^-1 dPsi L^-T).
    """
    m = sm.latent_sd.shape[0]
    g_sd = np.zeros(m)
    g_cor = np.zeros((m, m))
    if flags.psi_diagonal:
        g_sd = np.diag(g_chol).copy()
        return g_sd, g_cor
    chol = _chol_or_none(sm.latent_cov)
    if chol is None:
        return None
    s, r = sm.latent_sd, sm.latent_cor
    for k in range(m):
        d_psi = np.zeros((m, m))
        d_psi[k, :] += r[k, :] * s
        d_psi[:, k] += s * r[:, k]
        g_sd[k] = _chol_directional(chol, d_psi, g_chol)
    for i in range(m):
        for j in range(i + 1, m):
            d_psi = np.zeros((m, m))
            d_psi[i, j] = d_psi[j, i] = s[i] * s[j]
            g_cor[i, j] = _chol_directional(chol, d_psi, g_chol)
    return g_sd, g_cor


def _chol_directional(chol, d_psi, g_chol) -> float:
    y = solve_triangular(chol, d_psi, lower=True, check_finite=False)
    x = solve_triangular(chol, y.T, lower=True, check_finite=False).T
    d_l = chol @ _phi_half_diag(x)
    return float(np.sum(g_chol * d_l))


def _conditional_value_grad(ctx: ModelContext, c: np.ndarray, z: np.ndarray):
    """(logp, constrained grad, z grad) for the noncentered conditional form.

    Latent values enter as eta_i = E alpha + E L z_i with z standard
    normal, L a (possibly singular, diagonal-Psi) square root of Psi.
    The z-prior term -0.5 z'z - (nm/2) log 2pi is included here; the
    parameter prior is not.
    """
    t = ctx.templates
    flags = ctx.flags
    m = t.m
    n = ctx.dataset.n
    sm = assemble(t, c)

    if m > 0:
        if flags.b_recursive:
            e_mat = _neumann_inverse(sm.paths)
        else:
            a = np.eye(m) - sm.paths
            try:
                e_mat = np.linalg.inv(a)
            except np.linalg.LinAlgError:
                return None
            rcond = 1.0 / (np.linalg.norm(a, 1) * np.linalg.norm(e_mat, 1))
            if not np.isfinite(rcond) or rcond < _RCOND_MIN:
                return None
        if flags.psi_diagonal:
            l_psi = np.diag(sm.latent_sd)
        else:
            l_psi = _chol_or_none(sm.latent_cov)
            if l_psi is None:
                return None
        t_mat = e_mat @ l_psi
        z_mat = z.reshape(n, m)
        eta = e_mat @ sm.latent_means + z_mat @ t_mat.T
    else:
        e_mat = np.zeros((0, 0))
        l_psi = np.zeros((0, 0))
        t_mat = np.zeros((0, 0))
        z_mat = np.zeros((n, 0))
        eta = np.zeros((n, 0))

    obs = _conditional_observed_part(sm, eta, ctx.groups, flags, want_grads=True)
    if obs is None:
        return None
    logp, g_nu, g_lambda, g_eta, g_theta = obs
    logp -= 0.5 * (float(np.sum(z_mat * z_mat)) + n * m * _LOG_2PI)

    # chain eta = E alpha + z T' back to structure parameters
    col_g_eta = g_eta.sum(axis=0)
    g_alpha = e_mat.T @ col_g_eta
    g_t = g_eta.T @ z_mat
    g_e = np.outer(col_g_eta, sm.latent_means) + g_t @ l_psi.T
    g_b = e_mat.T @ g_e @ e_mat.T
    g_chol = e_mat.T @ g_t
    psi_grads = _psi_chol_with_grads(sm, flags, g_chol)
    if psi_grads is None:
        return None
    g_psi_sd, g_psi_cor = psi_grads

    s_t, r_t = sm.resid_sd, sm.resid_cor
    grads = {
        "intercepts": g_nu,
        "latent_means": g_alpha,
        "loadings": g_lambda,
        "paths": g_b,
        "resid_sd": 2.0 * ((g_theta * r_t) @ s_t),
        "resid_cor": 2.0 * (s_t[:, None] * g_theta * s_t[None, :]),
        "latent_sd": g_psi_sd,
        "latent_cor": g_psi_cor,
    }
    g_free = gather_free(t, grads)
    g_z = (g_eta @ t_mat - z_mat).reshape(-1)
    return logp, g_free, g_z


def posterior_logp_grad(
    ctx: ModelContext, u: np.ndarray, mode: str = "marginal"
) -> LikelihoodValue:
    """Log posterior and gradient on the unconstrained scale.

    In marginal mode ``u`` has one entry per free parameter.  In
    conditional mode it is extended by n*m standard-normal latent
    coordinates (noncentered), and the returned gradient covers both
    blocks.
    """
    k = ctx.templates.n_free
    c, dcdu = ctx.transforms.inverse_with_grad(u[:k])
    if mode == "marginal":
        res = _marginal_value_grad(ctx, c)
        if res is None:
            return _REJECTED
        logp, g_free = res
        pv, pg = log_prior_grad(ctx.priors, ctx.transforms, u[:k])
        return LikelihoodValue(logp + pv, g_free * dcdu + pg)
    if mode == "conditional":
        res = _conditional_value_grad(ctx, c, u[k:])
        if res is None:
            return _REJECTED
        logp, g_free, g_z = res
        pv, pg = log_prior_grad(ctx.priors, ctx.transforms, u[:k])
        return LikelihoodValue(
            logp + pv, np.concatenate([g_free * dcdu + pg, g_z])
        )
    raise ValueError(f"unknown likelihood mode {mode!r}")


def loglik_grad(
    ctx: ModelContext,
    u: np.ndarray,
    mode: str = "marginal",
    include_prior: bool = False,
) -> LikelihoodValue:
    """Selected log density and its gradient wrt unconstrained parameters.

    Without the prior this is the bare log-likelihood as a function of
    u (no Jacobian terms); with it, the full posterior kernel that the
    sampler sees.
    """
    if include_prior:
        return posterior_logp_grad(ctx, u, mode)
    k = ctx.templates.n_free
    c, dcdu = ctx.transforms.inverse_with_grad(u[:k])
    if mode == "marginal":
        res = _marginal_value_grad(ctx, c)
        if res is None:
            return _REJECTED
        logp, g_free = res
        return LikelihoodValue(logp, g_free * dcdu)
    if mode == "conditional":
        res = _conditional_value_grad(ctx, c, u[k:])
        if res is None:
            return _REJECTED
        logp, g_free, g_z = res
        # drop the standard-normal z term so this is the bare conditional
        # likelihood of (parameters, z)
        n_m = ctx.dataset.n * ctx.templates.m
        z = u[k:]
        logp += 0.5 * (float(np.sum(z * z)) + n_m * _LOG_2PI)
        return LikelihoodValue(logp, np.concatenate([g_free * dcdu, g_z + z]))
    raise ValueError(f"unknown likelihood mode {mode!r}")


@dataclass
class MlResult:
    """Maximum-likelihood point, curvature-based uncertainties, and fit."""

    theta: np.ndarray   # constrained scale
    se: np.ndarray      # delta-method standard errors, constrained scale
    logp: float
    converged: bool


def default_start(ctx: ModelContext) -> np.ndarray:
    """Moment-informed constrained-scale starting values."""
    t = ctx.templates
    values = ctx.dataset.values
    col_mean = np.nanmean(values, axis=0)
    with np.errstate(invalid="ignore"):
        col_sd = np.nanstd(values, axis=0)
    col_sd = np.where(np.isfinite(col_sd) & (col_sd > 0.1), col_sd, 1.0)
    start = np.zeros(t.n_free)
    for k, klass in enumerate(t.param_classes):
        if klass in ("loading", "path"):
            start[k] = 0.5
        elif klass == "resid_sd":
            _, r, _ = t.rep_slot(k)
            start[k] = col_sd[r]
        elif klass == "latent_sd":
            start[k] = 1.0
        elif klass == "intercept":
            _, r, _ = t.rep_slot(k)
            start[k] = col_mean[r]
    return start


def maximize_marginal_loglik(
    ctx: ModelContext,
    start: np.ndarray | None = None,
    restarts: int = 3,
    seed: int = 0,
    max_iter: int = 1000,
) -> MlResult:
    """Quasi-Newton ML fit of the marginal likelihood (no prior).

    Optimizes on the unconstrained scale, so the estimates are invariant
    to the sd/variance/precision prior parameterization.  Standard
    errors come from the finite-difference Hessian of the analytic
    gradient, mapped back by the delta method.  Rejected points score a
    large finite penalty so line searches back away from them.
    """
    tr = ctx.transforms
    if start is None:
        start = default_start(ctx)
    u0 = tr.forward(np.asarray(start, dtype=float))

    def neg(u):
        res = _marginal_value_grad(ctx, tr.inverse(u))
        if res is None:
            return 1e10, np.zeros_like(u)
        logp, g_free = res
        _, dcdu = tr.inverse_with_grad(u)
        return -logp, -(g_free * dcdu)

    rng = np.random.default_rng(seed)
    best = None
    for attempt in range(max(1, restarts)):
        u_init = u0 if attempt == 0 else u0 + rng.normal(scale=0.25, size=u0.size)
        res = minimize(neg, u_init, jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter})
        if best is None or res.fun < best.fun:
            best = res
    u_hat = best.x
    logp_hat = -float(best.fun)

    # delta-method standard errors from the numerical Hessian of the
    # analytic gradient
    k = u_hat.size
    hess = np.empty((k, k))
    for j in range(k):
        h = 1e-5 * max(1.0, abs(u_hat[j]))
        up, um = u_hat.copy(), u_hat.copy()
        up[j] += h
        um[j] -= h
        hess[:, j] = (neg(up)[1] - neg(um)[1]) / (2.0 * h)
    hess = 0.5 * (hess + hess.T)
    c_hat, dcdu = tr.inverse_with_grad(u_hat)
    try:
        cov_u = np.linalg.inv(hess)
        var_u = np.diag(cov_u)
        se = np.where(var_u > 0, np.sqrt(np.abs(var_u)) * np.abs(dcdu), np.nan)
    except np.linalg.LinAlgError:
        se = np.full(k, np.nan)
    return MlResult(theta=c_hat, se=se, logp=logp_hat, converged=bool(best.success))
