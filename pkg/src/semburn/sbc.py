"""Simulation-based calibration harness.

A calibrated sampler has a simple signature: draw parameters from the
prior, simulate data from them, refit, and the rank of each true value
among the retained posterior draws is uniform.  This module generates
those prior-predictive datasets, runs the standard sampler on each,
collects rank statistics with random tie-breaking, and tests the rank
histograms for uniformity with a Pearson chi-square.

Replications are independent, so they can run in a process pool; each
owns its own seed stream and results are keyed by replication index,
making the report identical however the work was scheduled.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .data import Dataset
from .likelihood import ModelContext
from .model import MatrixTemplates, ModelBuildError, assemble
from .posterior import ess_bulk
from .priors import PriorSet, default_priors, sample_prior
from .sampler import SamplerConfig, SamplerError, run_chains

__all__ = [
    "SKIP",
    "SbcConfig",
    "PriorDraw",
    "SbcResult",
    "generate_prior_dataset",
    "rank_statistic",
    "uniformity_check",
    "run_sbc",
]

_MAX_REDRAWS = 10_000


class _Skip:
    """Sentinel for an aborted prior-dataset draw; falsy."""

    __slots__ = ()

    def __repr__(self):
        return "SKIP"

    def __bool__(self):
        return False


SKIP = _Skip()


@dataclass(frozen=True)
class SbcConfig:
    """Harness settings.

    ``posterior_draws_kept`` (L) is the number of retained draws each
    rank is computed against; the sampler runs ``thinning`` times that
    many iterations and keeps every ``thinning``-th.  L + 1 must divide
    evenly into ``bins`` so uniform ranks imply equal bin probabilities.
    """

    replications: int = 100
    n_per_dataset: int = 75
    posterior_draws_kept: int = 99
    thinning: int = 10
    bins: int = 20
    priors: str = "set1"
    warmup: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if self.n_per_dataset < 1:
            raise ValueError("n_per_dataset must be positive")
        if self.posterior_draws_kept < 1:
            raise ValueError("posterior_draws_kept must be positive")
        if self.thinning < 1:
            raise ValueError("thinning must be positive")
        if self.bins < 1:
            raise ValueError("bins must be positive")
        if (self.posterior_draws_kept + 1) % self.bins != 0:
            raise ValueError(
                "posterior_draws_kept + 1 must be divisible by bins"
            )
        if self.replications < self.bins:
            raise ValueError("replications must be at least bins")
        if self.priors not in ("set1", "set2", "custom"):
            raise ValueError("priors must be set1, set2, or custom")


@dataclass(frozen=True)
class PriorDraw:
    """One accepted prior draw with its simulated dataset.

    Unpacks as ``theta, data = draw``; ``redraws`` counts the non-PD
    proposals discarded before this one was accepted.
    """

    theta: np.ndarray
    data: Dataset
    redraws: int

    def __iter__(self):
        return iter((self.theta, self.data))


def _prior_sigma(t: MatrixTemplates, theta: np.ndarray):
    """Marginal (mu, chol(Sigma)) for a prior draw, or None if not PD.

    Only the assembled covariance matters here: a draw whose residual
    or latent correlation block is indefinite still counts when the
    total covariance is positive definite, because data can be
    simulated from it.  The stricter fit-time rejection is applied by
    the likelihood, not the generator.
    """
    try:
        sm = assemble(t, theta)
    except ModelBuildError:
        return None
    eye = np.eye(t.m)
    try:
        e = np.linalg.solve(eye - sm.paths, eye)
    except np.linalg.LinAlgError:
        return None
    lt = sm.loadings @ e
    sigma = lt @ sm.latent_cov @ lt.T + sm.resid_cov
    if not np.all(np.isfinite(sigma)):
        return None
    mu = sm.intercepts + lt @ sm.latent_means
    try:
        chol = np.linalg.cholesky(0.5 * (sigma + sigma.T))
    except np.linalg.LinAlgError:
        return None
    return mu, chol


def generate_prior_dataset(
    t: MatrixTemplates,
    priors: PriorSet,
    n: int,
    rng: np.random.Generator,
):
    """Draw parameters from the prior and simulate n data rows.

    Draws whose implied covariance is not positive definite are
    redrawn, up to a bound; returns SKIP if the bound is exhausted.
    """
    redraws = 0
    while redraws <= _MAX_REDRAWS:
        theta = sample_prior(priors, rng)
        moments = _prior_sigma(t, theta)
        if moments is None:
            redraws += 1
            continue
        mu, chol = moments
        z = rng.standard_normal((n, t.p))
        data = Dataset(columns=list(t.observed), values=mu + z @ chol.T)
        return PriorDraw(theta=theta, data=data, redraws=redraws)
    return SKIP


def rank_statistic(
    prior_value: float, draws: np.ndarray, rng: np.random.Generator
) -> int:
    """Rank of the prior value among posterior draws, ties randomized.

    Counts draws strictly below the value, plus a uniform share of any
    exact ties, giving a rank in {0..len(draws)}.
    """
    below = int(np.sum(draws < prior_value))
    ties = int(np.sum(draws == prior_value))
    if ties:
        below += int(rng.integers(0, ties + 1))
    return below


def uniformity_check(
    ranks: np.ndarray, bins: int, n_ranks: int
) -> tuple[float, float]:
    """Pearson chi-square of rank counts against equal bin probability.

    ``n_ranks`` is the number of distinct rank values (L + 1) and must
    be divisible by ``bins``.  Returns (statistic, p) with bins - 1
    degrees of freedom.
    """
    if n_ranks % bins != 0:
        raise ValueError("number of rank values must be divisible by bins")
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        return float("nan"), float("nan")
    if ranks.min() < 0 or ranks.max() >= n_ranks:
        raise ValueError("rank out of range")
    if bins == 1:
        return 0.0, 1.0
    counts = np.bincount(ranks * bins // n_ranks, minlength=bins)
    expected = ranks.size / bins
    stat = float(np.sum((counts - expected) ** 2) / expected)
    return stat, float(chi2.sf(stat, bins - 1))


@dataclass
class SbcResult:
    """Rank records and uniformity tests for one harness run."""

    param_names: list[str]
    ranks: np.ndarray            # (accepted replications, n_free)
    histograms: np.ndarray       # (n_free, bins)
    chi_square: np.ndarray
    p_values: np.ndarray
    posterior_draws_kept: int
    bins: int
    attempts: int
    accepted: int
    redraws: int
    skipped: int
    fit_failures: int
    low_ess: int
    config: SbcConfig = field(repr=False, default=None)

    def to_json(self) -> dict:
        return {
            "params": list(self.param_names),
            "ranks": {
                name: self.ranks[:, i].tolist()
                for i, name in enumerate(self.param_names)
            },
            "histograms": {
                name: self.histograms[i].tolist()
                for i, name in enumerate(self.param_names)
            },
            "chi_square": {
                name: float(self.chi_square[i])
                for i, name in enumerate(self.param_names)
            },
            "p_values": {
                name: float(self.p_values[i])
                for i, name in enumerate(self.param_names)
            },
            "posterior_draws_kept": self.posterior_draws_kept,
            "bins": self.bins,
            "accounting": {
                "attempts": self.attempts,
                "accepted": self.accepted,
                "redraws": self.redraws,
                "skipped": self.skipped,
                "fit_failures": self.fit_failures,
                "low_ess": self.low_ess,
            },
        }


def _thin_indices(total: int, keep: int) -> np.ndarray:
    """Evenly spaced draw indices ending at the last draw."""
    return (np.arange(1, keep + 1) * total) // keep - 1


def _replicate(args):
    """One replication: generate, fit, thin, rank.

    Returns (ranks or None, redraws, skipped, fit_failed, low_ess).
    """
    t, priors, config, state, fit_fn = args
    gen_seq, fit_seq, tie_seq = state.spawn(3)
    gen_rng = np.random.default_rng(gen_seq)
    keep = config.posterior_draws_kept
    total = keep * config.thinning

    drawn = generate_prior_dataset(t, priors, config.n_per_dataset, gen_rng)
    if drawn is SKIP:
        return None, _MAX_REDRAWS + 1, True, False, False

    fit_seed = int(fit_seq.generate_state(1)[0])
    low = False
    try:
        if fit_fn is not None:
            flat = np.asarray(fit_fn(t, drawn.data, priors, total, fit_seed))
        else:
            ctx = ModelContext.build(t, drawn.data, priors)
            sampler_config = SamplerConfig(
                chains=1, warmup=config.warmup, samples=total,
                seed=fit_seed,
            )
            fit = run_chains(ctx, sampler_config)
            flat = fit.stacked()
            ess = np.array([
                ess_bulk(fit.draws[:, :, k])[0] for k in range(t.n_free)
            ])
            low = bool(np.any(np.nan_to_num(ess, nan=0.0) < keep))
    except (SamplerError, ModelBuildError):
        return None, drawn.redraws, False, True, False

    thinned = flat[_thin_indices(total, keep)]
    tie_rng = np.random.default_rng(tie_seq)
    ranks = np.array([
        rank_statistic(drawn.theta[k], thinned[:, k], tie_rng)
        for k in range(t.n_free)
    ])
    return ranks, drawn.redraws, False, False, low


def run_sbc(
    t: MatrixTemplates,
    config: SbcConfig,
    priors: PriorSet | None = None,
    fit_fn=None,
    progress=None,
) -> SbcResult:
    """Run the full calibration loop and test rank uniformity.

    ``priors`` must be given when the config selects custom priors;
    otherwise the named default set is built for the model.  ``fit_fn``
    replaces the MCMC fit with an exact or surrogate posterior sampler
    taking (templates, data, priors, n_draws, seed) and returning a
    (n_draws, n_free) array; replications then run sequentially.
    ``progress`` is called with (completed, total) as replications
    finish.
    """
    if config.priors == "custom":
        if priors is None:
            raise ValueError("custom prior selection needs a PriorSet")
    elif priors is None:
        priors = default_priors(t, informative=config.priors == "set2")

    states = np.random.SeedSequence(config.seed).spawn(config.replications)
    jobs = [(t, priors, config, s, fit_fn) for s in states]

    threads = int(os.environ.get("SEMBURN_THREADS") or 0)
    if threads <= 0:
        threads = min(os.cpu_count() or 1, config.replications)
    if fit_fn is None and threads > 1 and config.replications > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {
                pool.submit(_replicate, job): i for i, job in enumerate(jobs)
            }
            results = [None] * len(jobs)
            for done, fut in enumerate(as_completed(futures), start=1):
                results[futures[fut]] = fut.result()
                if progress is not None:
                    progress(done, len(jobs))
    else:
        results = []
        for i, job in enumerate(jobs, start=1):
            results.append(_replicate(job))
            if progress is not None:
                progress(i, len(jobs))

    rank_rows = []
    redraws = skipped = fit_failures = low_ess = 0
    for ranks, re_count, skip, failed, low in results:
        skipped += int(skip)
        fit_failures += int(failed)
        low_ess += int(low)
        redraws += re_count
        if ranks is not None:
            rank_rows.append(ranks)

    accepted = len(rank_rows)
    keep = config.posterior_draws_kept
    ranks = (
        np.stack(rank_rows)
        if rank_rows else np.empty((0, t.n_free), dtype=int)
    )
    histograms = np.stack([
        np.bincount(
            ranks[:, k] * config.bins // (keep + 1), minlength=config.bins
        )
        for k in range(t.n_free)
    ]) if t.n_free else np.empty((0, config.bins), dtype=int)
    stats = np.empty(t.n_free)
    pvals = np.empty(t.n_free)
    for k in range(t.n_free):
        stats[k], pvals[k] = uniformity_check(
            ranks[:, k], config.bins, keep + 1
        )
    return SbcResult(
        param_names=list(t.param_names),
        ranks=ranks,
        histograms=histograms,
        chi_square=stats,
        p_values=pvals,
        posterior_draws_kept=keep,
        bins=config.bins,
        attempts=accepted + fit_failures + redraws,
        accepted=accepted,
        redraws=redraws,
        skipped=skipped,
        fit_failures=fit_failures,
        low_ess=low_ess,
        config=config,
    )
