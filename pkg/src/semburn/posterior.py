"""Post-sampling processing: sign correction, latent scores, diagnostics.

Sign correction resolves the reflection invariance of variance-scaled
latent variables: negating a latent's loadings together with the
regression and covariance terms that couple to it leaves the implied
moments untouched, so chains wander between mirror modes.  Draws are
folded onto the branch where each focal loading is positive.

Diagnostics are the rank-normalized split potential-scale-reduction
factor and bulk effective sample size, computed per parameter across
chains, plus ESS per second of post-warmup sampling time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, rankdata

from .likelihood import ModelContext, implied_moments
from .model import MatrixTemplates, assemble
from .sampler import DrawsMatrix

__all__ = [
    "SignRule",
    "build_sign_rule",
    "sign_correct",
    "latent_scores",
    "rhat",
    "ess_bulk",
    "SummaryTable",
    "summarize",
]


@dataclass(frozen=True)
class SignRule:
    """Reflection bookkeeping for the latents that need it.

    ``focal`` maps a latent index to the parameter index of its first
    free loading; ``coupling`` is an (n_free, n_latents) 0/1 parity
    matrix saying which free parameters change sign when each ruled
    latent is reflected.
    """

    focal: dict[int, int]
    coupling: np.ndarray

    @property
    def active(self) -> bool:
        return bool(self.focal)


def _slot_couplings(t: MatrixTemplates):
    """Per free parameter, the list of latent coupling sets of its slots.

    A slot's coupling set holds the latents whose reflection negates
    that slot; a latent appearing twice (a variance) cancels out.
    """
    per_param: dict[int, list[frozenset[int]]] = {k: [] for k in range(t.n_free)}
    fixed_nonzero: dict[int, set[float]] = {}

    def visit(idx, fix, couple_of):
        if idx.size == 0:
            return
        it = np.nditer(idx, flags=["multi_index"])
        for k in it:
            k = int(k)
            pos = it.multi_index
            couple = couple_of(pos)
            if k >= 0:
                per_param[k].append(couple)
            elif couple and fix[pos] != 0.0:
                for j in couple:
                    fixed_nonzero.setdefault(j, set()).add(float(fix[pos]))

    visit(t.lambda_idx, t.lambda_fix, lambda pos: frozenset({pos[1]}))
    visit(t.b_idx, t.b_fix,
          lambda pos: frozenset({pos[0]}) ^ frozenset({pos[1]}))
    visit(t.latent_cor_idx, t.latent_cor_fix,
          lambda pos: frozenset({pos[0]}) ^ frozenset({pos[1]}))
    visit(t.alpha_idx, t.alpha_fix, lambda pos: frozenset({pos[0]}))
    # intercepts and residual terms never couple to a latent reflection
    return per_param, fixed_nonzero


def build_sign_rule(t: MatrixTemplates) -> SignRule:
    """Determine which latents can be sign-corrected, and how.

    A latent gets a rule only when its first free loading exists and
    every parameter its reflection touches can actually be negated:
    no nonzero fixed value sits in the flip set, and no equality
    constraint ties a flipped slot to an unflipped one.
    """
    per_param, fixed_nonzero = _slot_couplings(t)

    candidates: set[int] = set()
    focal: dict[int, int] = {}
    for j in range(t.m):
        col = t.lambda_idx[:, j]
        free = col[col >= 0]
        if free.size:
            focal[j] = int(free.min())
            candidates.add(j)
    candidates -= set(fixed_nonzero)

    # a parameter with slots that disagree about their coupling (after
    # restricting to candidate latents) cannot flip consistently; drop
    # every latent involved in the disagreement and re-check
    while True:
        dropped = False
        for k, couples in per_param.items():
            effective = {c & frozenset(candidates) for c in couples}
            if len(effective) > 1:
                for c in effective:
                    candidates -= c
                dropped = True
        if not dropped:
            break
    focal = {j: k for j, k in focal.items() if j in candidates}

    coupling = np.zeros((t.n_free, t.m), dtype=np.int8)
    for k, couples in per_param.items():
        if couples:
            eff = couples[0] & frozenset(candidates)
            for j in eff:
                coupling[k, j] = 1
    return SignRule(focal=focal, coupling=coupling)


def sign_correct(draws: DrawsMatrix, rule: SignRule) -> DrawsMatrix:
    """Fold every draw onto the positive branch of each ruled latent.

    Implied moments are invariant because each reflection negates a
    latent's loadings, its path row and column, and its covariances as
    one unit.  Applying the correction twice is a no-op.
    """
    if not rule.active:
        return draws
    out = draws.draws.copy()
    flat = out.reshape(-1, out.shape[2])
    latents = sorted(rule.focal)
    flips = np.stack(
        [flat[:, rule.focal[j]] < 0 for j in latents], axis=1
    ).astype(np.int8)
    parity = flips @ rule.coupling[:, latents].T
    flat *= np.where(parity % 2 == 1, -1.0, 1.0)
    return DrawsMatrix(
        draws=out, logp=draws.logp, divergent=draws.divergent,
        seconds=draws.seconds, param_names=draws.param_names,
        param_classes=draws.param_classes, mode=draws.mode,
        accept_rate=draws.accept_rate, depth_hits=draws.depth_hits,
    )


def latent_scores(
    draws: DrawsMatrix, ctx: ModelContext, rng: np.random.Generator
) -> np.ndarray:
    """Per-draw latent samples from the exact conditional normal.

    For every stored parameter draw and every data row, eta is drawn
    from N(mu_eta + G (y_obs - mu_obs), Sigma_eta - G C'), the joint
    normal conditioned on that row's observed entries.  Returns an
    array of shape (total draws, n, m).
    """
    t = ctx.templates
    n, m = ctx.dataset.n, t.m
    flat = draws.stacked()
    out = np.empty((flat.shape[0], n, m))
    for d, theta in enumerate(flat):
        sm = assemble(t, theta)
        mom = implied_moments(sm, ctx.flags)
        for g in ctx.groups:
            o = g.observed_idx
            cross = sm.loadings[o] @ mom.latent_cov      # C = cov(y_o, eta)
            gain = np.linalg.solve(mom.sigma[g._grid], cross).T
            cond_cov = mom.latent_cov - gain @ cross
            cond_cov = 0.5 * (cond_cov + cond_cov.T)
            vals, vecs = np.linalg.eigh(cond_cov)
            root = vecs * np.sqrt(np.clip(vals, 0.0, None))
            means = mom.latent_mean + (g.values - mom.mu[o]) @ gain.T
            z = rng.standard_normal((g.count, m))
            out[d, g.row_indices] = means + z @ root.T
    return out


def _split_chains(x: np.ndarray) -> np.ndarray:
    """Halve each chain; (c, n) -> (2c, n//2), dropping an odd tail draw."""
    c, n = x.shape
    half = n // 2
    return np.concatenate([x[:, :half], x[:, half:2 * half]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    ranks = rankdata(x, method="average").reshape(x.shape)
    size = x.size
    return norm.ppf((ranks - 0.375) / (size + 0.25))


def _split_rhat(z: np.ndarray) -> float:
    c, n = z.shape
    chain_means = z.mean(axis=1)
    within = float(np.mean(np.var(z, axis=1, ddof=1)))
    between = n * float(np.var(chain_means, ddof=1))
    var_plus = (n - 1.0) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def _degenerate(x: np.ndarray) -> bool:
    return bool(np.ptp(x) == 0.0) or x.shape[1] < 4


def rhat(x: np.ndarray) -> tuple[float, bool]:
    """Split-Rhat: the worst of the rank-normalized and plain variants.

    Rank normalization is robust to heavy tails but its value saturates
    once chains separate completely, so the plain split statistic is
    kept in the max to preserve sensitivity to gross location shifts.
    ``x`` is (chains, draws).  Returns (value, degenerate); constant or
    too-short input reports 1.0 with the degenerate flag raised.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if _degenerate(x):
        return 1.0, True
    z = _split_chains(x)
    bulk = _split_rhat(_rank_normalize(z))
    folded = _split_rhat(_rank_normalize(np.abs(z - np.median(z))))
    return max(bulk, folded, _split_rhat(z)), False


def _autocov(row: np.ndarray) -> np.ndarray:
    n = row.size
    pad = 2 ** int(np.ceil(np.log2(2 * n)))
    fx = np.fft.rfft(row - row.mean(), pad)
    out = np.fft.irfft(fx * np.conj(fx), pad)[:n]
    return out / n


def ess_bulk(x: np.ndarray) -> tuple[float, bool]:
    """Bulk effective sample size on rank-normalized split chains.

    Autocorrelations are combined across chains, truncated by the
    initial-positive-pair rule and forced monotone before summing.
    Antithetic chains may legitimately report more than the raw draw
    count.  Returns (value, degenerate).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if _degenerate(x):
        return float("nan"), True
    z = _rank_normalize(_split_chains(x))
    c, n = z.shape
    acov = np.stack([_autocov(row) for row in z])
    chain_means = z.mean(axis=1)
    mean_var = float(acov[:, 0].mean()) * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if c > 1:
        var_plus += float(np.var(chain_means, ddof=1))

    rho = np.zeros(n)
    rho[0] = 1.0
    rho[1] = 1.0 - (mean_var - float(acov[:, 1].mean())) / var_plus
    even, odd = 1.0, rho[1]
    t = 1
    while t < n - 3 and (even + odd) > 0.0:
        even = 1.0 - (mean_var - float(acov[:, t + 1].mean())) / var_plus
        odd = 1.0 - (mean_var - float(acov[:, t + 2].mean())) / var_plus
        if even + odd >= 0.0:
            rho[t + 1] = even
            rho[t + 2] = odd
        t += 2
    max_t = t - 2
    if even > 0.0:
        rho[max_t + 1] = even
    # enforce monotone decreasing pair sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    tau = -1.0 + 2.0 * float(np.sum(rho[: max_t + 1])) + float(rho[max_t + 1])
    total = c * n
    tau = max(tau, 1.0 / np.log10(total)) if total > 10 else max(tau, 1e-3)
    return float(total / tau), False


@dataclass
class SummaryTable:
    """Per-parameter posterior summaries and efficiency diagnostics."""

    names: list[str]
    mean: np.ndarray
    sd: np.ndarray
    q5: np.ndarray
    q50: np.ndarray
    q95: np.ndarray
    rhat: np.ndarray
    ess_bulk: np.ndarray
    ess_per_sec: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def rows(self):
        for i, name in enumerate(self.names):
            yield {
                "param": name,
                "mean": self.mean[i], "sd": self.sd[i],
                "q5": self.q5[i], "q50": self.q50[i], "q95": self.q95[i],
                "rhat": self.rhat[i], "ess_bulk": self.ess_bulk[i],
                "ess_per_sec": self.ess_per_sec[i],
            }


def summarize(draws: DrawsMatrix) -> SummaryTable:
    """Posterior summaries with ESS/s over summed chain sampling time."""
    k = draws.draws.shape[2]
    total_seconds = float(draws.seconds.sum())
    flat = draws.stacked()
    mean = flat.mean(axis=0)
    sd = flat.std(axis=0, ddof=1) if flat.shape[0] > 1 else np.zeros(k)
    q5, q50, q95 = np.percentile(flat, [5.0, 50.0, 95.0], axis=0)
    rhats = np.empty(k)
    esss = np.empty(k)
    degenerate = np.zeros(k, dtype=bool)
    for i in range(k):
        series = draws.draws[:, :, i]
        rhats[i], flag_r = rhat(series)
        esss[i], flag_e = ess_bulk(series)
        degenerate[i] = flag_r or flag_e
    with np.errstate(invalid="ignore"):
        eps = esss / total_seconds if total_seconds > 0 else np.full(k, np.nan)
    return SummaryTable(
        names=list(draws.param_names), mean=mean, sd=sd,
        q5=q5, q50=q50, q95=q95, rhat=rhats, ess_bulk=esss,
        ess_per_sec=eps, degenerate=degenerate,
    )
