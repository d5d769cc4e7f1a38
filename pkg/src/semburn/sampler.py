"""Adaptive Hamiltonian Monte Carlo with dynamic trajectory doubling.

One sampler serves both likelihood modes: it sees only a log-density
callback over an unconstrained vector, so the marginal and conditional
targets (and test targets) plug in the same way.  Trajectories double
until a generalized U-turn or the depth cap, draws are selected
multinomially by density weight, step size adapts by dual averaging
toward a target acceptance statistic, and a diagonal mass matrix is
re-estimated over growing warmup windows.

Chains are independent: each owns an RNG spawned from the run seed, so
results are bit-identical for a given configuration no matter how many
worker processes execute them.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .likelihood import ModelContext, conditional_dim, posterior_logp_grad

__all__ = [
    "SamplerConfig",
    "DrawsMatrix",
    "SamplerError",
    "nuts_chain",
    "initialize",
    "loading_orientation",
    "run_chains",
]

_DIVERGENCE_GAP = 1000.0
_MAX_INIT_TRIES = 100


class SamplerError(RuntimeError):
    """Sampling could not start or proceed."""


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 300
    samples: int = 1000
    seed: int = 0
    mode: str = "marginal"
    max_treedepth: int = 10
    target_accept: float = 0.8

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be at least 1")
        if self.warmup < 50:
            raise ValueError("warmup must be at least 50 iterations")
        if self.samples < 1:
            raise ValueError("samples must be at least 1")
        if self.mode not in ("marginal", "conditional"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be inside (0, 1)")
        if self.max_treedepth < 1:
            raise ValueError("max_treedepth must be at least 1")


@dataclass
class DrawsMatrix:
    """Post-warmup draws on the constrained scale, plus run statistics."""

    draws: np.ndarray        # (chains, samples, n_free)
    logp: np.ndarray         # (chains, samples)
    divergent: np.ndarray    # (chains, samples) bool
    seconds: np.ndarray      # (chains,) post-warmup sampling wall clock
    param_names: list[str]
    param_classes: list[str]
    mode: str = "marginal"
    accept_rate: np.ndarray | None = None   # (chains,) mean accept statistic
    depth_hits: np.ndarray | None = None    # (chains,) treedepth saturations

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_samples(self) -> int:
        return self.draws.shape[1]

    def stacked(self) -> np.ndarray:
        """All chains concatenated, (chains*samples, n_free)."""
        c, s, k = self.draws.shape
        return self.draws.reshape(c * s, k)


@dataclass
class _Tree:
    """One trajectory segment: endpoints, weight, and turn bookkeeping."""

    q_minus: np.ndarray
    p_minus: np.ndarray
    ps_minus: np.ndarray     # inverse-mass-weighted momentum at the back
    grad_minus: np.ndarray
    q_plus: np.ndarray
    p_plus: np.ndarray
    ps_plus: np.ndarray
    grad_plus: np.ndarray
    rho: np.ndarray          # summed momentum over the segment
    prop: np.ndarray
    prop_logp: float
    prop_grad: np.ndarray
    log_sum_w: float
    sum_alpha: float
    n_alpha: int
    n_div: int
    turning: bool


def _leapfrog(f, q, p, grad, eps, inv_mass):
    p_half = p + 0.5 * eps * grad
    q_new = q + eps * (inv_mass * p_half)
    logp, grad_new = f(q_new)
    p_new = p_half + 0.5 * eps * grad_new
    return q_new, p_new, logp, grad_new


def _kinetic(p, inv_mass) -> float:
    return 0.5 * float(p @ (inv_mass * p))


def _no_uturn(ps_back, ps_front, rho) -> bool:
    return float(ps_back @ rho) > 0.0 and float(ps_front @ rho) > 0.0


def _leaf(f, q, p, grad, v, eps, inv_mass, h0) -> _Tree:
    q1, p1, logp1, grad1 = _leapfrog(f, q, p, grad, v * eps, inv_mass)
    h = -logp1 + _kinetic(p1, inv_mass)
    divergent = (not np.isfinite(h)) or (h - h0) > _DIVERGENCE_GAP
    lw = -np.inf if divergent else h0 - h
    alpha = 0.0 if divergent else min(1.0, float(np.exp(min(0.0, h0 - h))))
    ps1 = inv_mass * p1
    return _Tree(
        q_minus=q1, p_minus=p1, ps_minus=ps1, grad_minus=grad1,
        q_plus=q1, p_plus=p1, ps_plus=ps1, grad_plus=grad1,
        rho=p1.copy(), prop=q1, prop_logp=logp1, prop_grad=grad1,
        log_sum_w=lw, sum_alpha=alpha, n_alpha=1,
        n_div=int(divergent), turning=False,
    )


def _merged_turning(left: _Tree, right: _Tree, rho_total) -> bool:
    """Generalized U-turn over a merged span and both joint boundaries.

    ``left`` precedes ``right`` in trajectory time.
    """
    if not _no_uturn(left.ps_minus, right.ps_plus, rho_total):
        return True
    if not _no_uturn(left.ps_minus, right.ps_minus, left.rho + right.p_minus):
        return True
    if not _no_uturn(left.ps_plus, right.ps_plus, right.rho + left.p_plus):
        return True
    return False


def _build_tree(f, depth, q, p, grad, v, eps, inv_mass, h0, rng) -> _Tree:
    if depth == 0:
        return _leaf(f, q, p, grad, v, eps, inv_mass, h0)
    first = _build_tree(f, depth - 1, q, p, grad, v, eps, inv_mass, h0, rng)
    if first.n_div or first.turning:
        return first
    if v > 0:
        q2, p2, grad2 = first.q_plus, first.p_plus, first.grad_plus
    else:
        q2, p2, grad2 = first.q_minus, first.p_minus, first.grad_minus
    second = _build_tree(f, depth - 1, q2, p2, grad2, v, eps, inv_mass, h0, rng)

    left, right = (first, second) if v > 0 else (second, first)
    log_sum_w = np.logaddexp(first.log_sum_w, second.log_sum_w)
    take_second = (
        second.log_sum_w > -np.inf
        and np.log(rng.random()) < second.log_sum_w - log_sum_w
    )
    prop, prop_logp, prop_grad = (
        (second.prop, second.prop_logp, second.prop_grad) if take_second
        else (first.prop, first.prop_logp, first.prop_grad)
    )
    rho = first.rho + second.rho
    return _Tree(
        q_minus=left.q_minus, p_minus=left.p_minus,
        ps_minus=left.ps_minus, grad_minus=left.grad_minus,
        q_plus=right.q_plus, p_plus=right.p_plus,
        ps_plus=right.ps_plus, grad_plus=right.grad_plus,
        rho=rho, prop=prop, prop_logp=prop_logp, prop_grad=prop_grad,
        log_sum_w=log_sum_w,
        sum_alpha=first.sum_alpha + second.sum_alpha,
        n_alpha=first.n_alpha + second.n_alpha,
        n_div=first.n_div + second.n_div,
        turning=second.turning or _merged_turning(left, right, rho),
    )


def _transition(f, q, logp, grad, eps, inv_mass, max_treedepth, rng):
    """One trajectory: returns (q, logp, grad, accept_stat, divergent, saturated)."""
    dim = q.size
    p0 = rng.standard_normal(dim) / np.sqrt(inv_mass)
    h0 = -logp + _kinetic(p0, inv_mass)
    ps0 = inv_mass * p0

    tree = _Tree(
        q_minus=q, p_minus=p0, ps_minus=ps0, grad_minus=grad,
        q_plus=q, p_plus=p0, ps_plus=ps0, grad_plus=grad,
        rho=p0.copy(), prop=q, prop_logp=logp, prop_grad=grad,
        log_sum_w=0.0, sum_alpha=0.0, n_alpha=0, n_div=0, turning=False,
    )
    divergent = False
    stopped_early = False
    depth = 0
    while depth < max_treedepth:
        v = 1 if rng.random() < 0.5 else -1
        if v > 0:
            sub = _build_tree(f, depth, tree.q_plus, tree.p_plus,
                              tree.grad_plus, v, eps, inv_mass, h0, rng)
        else:
            sub = _build_tree(f, depth, tree.q_minus, tree.p_minus,
                              tree.grad_minus, v, eps, inv_mass, h0, rng)
        tree.sum_alpha += sub.sum_alpha
        tree.n_alpha += sub.n_alpha
        if sub.n_div:
            divergent = True
            stopped_early = True
            break
        if sub.turning:
            stopped_early = True
            break
        # biased progressive sampling favors the fresh half of the trajectory
        if np.log(rng.random()) < sub.log_sum_w - tree.log_sum_w:
            tree.prop = sub.prop
            tree.prop_logp = sub.prop_logp
            tree.prop_grad = sub.prop_grad
        tree.log_sum_w = np.logaddexp(tree.log_sum_w, sub.log_sum_w)
        rho = tree.rho + sub.rho
        left, right = (tree, sub) if v > 0 else (sub, tree)
        done = _merged_turning(left, right, rho)
        tree.rho = rho
        if v > 0:
            tree.q_plus, tree.p_plus = sub.q_plus, sub.p_plus
            tree.ps_plus, tree.grad_plus = sub.ps_plus, sub.grad_plus
        else:
            tree.q_minus, tree.p_minus = sub.q_minus, sub.p_minus
            tree.ps_minus, tree.grad_minus = sub.ps_minus, sub.grad_minus
        depth += 1
        if done:
            stopped_early = True
            break
    accept_stat = tree.sum_alpha / tree.n_alpha if tree.n_alpha else 0.0
    saturated = depth >= max_treedepth and not stopped_early
    return (tree.prop, tree.prop_logp, tree.prop_grad, accept_stat,
            divergent, saturated)


def _initial_step_size(f, q, logp, grad, inv_mass, rng) -> float:
    """Double/halve a unit step until the one-step accept ratio crosses 1/2."""
    eps = 1.0
    p0 = rng.standard_normal(q.size) / np.sqrt(inv_mass)
    h0 = -logp + _kinetic(p0, inv_mass)

    def gap(e):
        _, p1, logp1, _ = _leapfrog(f, q, p0, grad, e, inv_mass)
        h1 = -logp1 + _kinetic(p1, inv_mass)
        return h0 - h1 if np.isfinite(h1) else -np.inf

    direction = 1 if gap(eps) > np.log(0.5) else -1
    for _ in range(100):
        eps_next = eps * (2.0 if direction > 0 else 0.5)
        g = gap(eps_next)
        if (direction > 0 and g <= np.log(0.5)) or (
            direction < 0 and g >= np.log(0.5)
        ):
            break
        eps = eps_next
        if eps > 1e7 or eps < 1e-10:
            break
    return eps


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target accept rate."""

    gamma = 0.05
    t0 = 10.0
    kappa = 0.75

    def __init__(self, eps0: float, target: float):
        self.mu = np.log(10.0 * eps0)
        self.target = target
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.t = 0

    def update(self, accept_stat: float) -> float:
        self.t += 1
        frac = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - np.sqrt(self.t) / self.gamma * self.h_bar
        w = self.t ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    @property
    def adapted(self) -> float:
        return float(np.exp(self.log_eps_bar))


class _RunningVariance:
    """Welford accumulator for the diagonal mass estimate."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def push(self, x: np.ndarray):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized(self) -> np.ndarray:
        if self.n < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.n - 1)
        w = self.n / (self.n + 5.0)
        return w * var + (1.0 - w) * 1e-3


def _mass_windows(warmup: int) -> list[tuple[int, int]]:
    """Growing (start, end) estimation windows between the step-size phases."""
    init_buf = max(1, int(round(0.15 * warmup)))
    term_buf = max(1, int(round(0.10 * warmup)))
    end_limit = warmup - term_buf
    out = []
    start, size = init_buf, 25
    while start < end_limit:
        end = start + size
        if end > end_limit or end + 2 * size > end_limit:
            end = end_limit
        out.append((start, end))
        start = end
        size *= 2
    return out


def nuts_chain(
    f,
    u0: np.ndarray,
    warmup: int,
    samples: int,
    rng: np.random.Generator,
    max_treedepth: int = 10,
    target_accept: float = 0.8,
):
    """Run one chain of the sampler against log-density callback ``f``.

    ``f(u) -> (logp, grad)`` where a zero-density point reports
    ``logp = -inf``.  Returns (draws, logp, divergent, accept_stats,
    depth_hits, seconds) with draws on the sampling (unconstrained)
    scale and seconds covering only the post-warmup loop.
    """
    q = np.asarray(u0, dtype=float).copy()
    logp, grad = f(q)
    if not np.isfinite(logp):
        raise SamplerError("chain started at a zero-density point")

    dim = q.size
    inv_mass = np.ones(dim)
    # exploding trajectories legitimately overflow before they are
    # rejected as divergent, so keep those warnings quiet here
    with np.errstate(over="ignore", invalid="ignore"):
        eps = _initial_step_size(f, q, logp, grad, inv_mass, rng)
        da = _DualAveraging(eps, target_accept)
        windows = _mass_windows(warmup)
        window_pos = 0
        welford = _RunningVariance(dim)

        for it in range(warmup):
            q, logp, grad, alpha, _, _ = _transition(
                f, q, logp, grad, eps, inv_mass, max_treedepth, rng
            )
            eps = da.update(alpha)
            if window_pos < len(windows):
                start, end = windows[window_pos]
                if it >= start:
                    welford.push(q)
                if it == end - 1:
                    # dq/dt = inv_mass * p, so inv_mass is the inverse
                    # metric and takes the variance estimate directly
                    inv_mass = np.clip(welford.regularized(), 1e-10, None)
                    window_pos += 1
                    welford = _RunningVariance(dim)
                    eps = _initial_step_size(f, q, logp, grad, inv_mass, rng)
                    da = _DualAveraging(eps, target_accept)
        eps = da.adapted

        draws = np.empty((samples, dim))
        logps = np.empty(samples)
        divergent = np.zeros(samples, dtype=bool)
        accept = np.empty(samples)
        depth_hits = 0
        t_start = time.perf_counter()
        for it in range(samples):
            q, logp, grad, alpha, div, saturated = _transition(
                f, q, logp, grad, eps, inv_mass, max_treedepth, rng
            )
            draws[it] = q
            logps[it] = logp
            divergent[it] = div
            accept[it] = alpha
            depth_hits += int(saturated)
        seconds = time.perf_counter() - t_start
    return draws, logps, divergent, accept, depth_hits, seconds


def loading_orientation(templates) -> np.ndarray:
    """Start-value sign for each free parameter: +-1 or 0 (leave random).

    Factors scaled by a fixed nonzero anchor loading are not symmetric
    under reflection: a start with the free loadings on the wrong side of
    zero cannot cross the likelihood barrier at zero and settles in a
    degenerate mode where the factor collapses.  Those loadings get the
    anchor's sign.  Factors scaled by a fixed variance keep random signs;
    their reflection is an exact symmetry handled after sampling.
    """
    orient = np.zeros(templates.n_free)
    claimed = np.zeros(templates.n_free, dtype=bool)
    for k in range(templates.m):
        fixed = (templates.lambda_idx[:, k] < 0) & (templates.lambda_fix[:, k] != 0)
        if not fixed.any():
            continue
        anchor_sign = np.sign(templates.lambda_fix[np.argmax(fixed), k])
        for pidx in templates.lambda_idx[:, k]:
            if pidx < 0:
                continue
            if claimed[pidx] and orient[pidx] != anchor_sign:
                orient[pidx] = 0.0  # shared across factors with opposite anchors
            else:
                orient[pidx] = anchor_sign
                claimed[pidx] = True
    return orient


def initialize(
    f, dim: int, rng: np.random.Generator, orient: np.ndarray | None = None
) -> np.ndarray:
    """Uniform[-2, 2] starts, retried until the density is finite.

    ``orient`` optionally forces the sign of some coordinates (see
    loading_orientation); magnitudes stay uniform and the RNG stream is
    consumed identically either way.
    """
    for _ in range(_MAX_INIT_TRIES):
        u = rng.uniform(-2.0, 2.0, dim)
        if orient is not None:
            forced = orient != 0.0
            u[forced] = np.abs(u[forced]) * orient[forced]
        logp, _ = f(u)
        if np.isfinite(logp):
            return u
    raise SamplerError(
        f"no finite-density start found in {_MAX_INIT_TRIES} attempts; "
        "the model may be inconsistent with its fixed values"
    )


def _posterior_callback(ctx: ModelContext, mode: str):
    dim = ctx.n_free if mode == "marginal" else conditional_dim(ctx)

    def f(u):
        val = posterior_logp_grad(ctx, u, mode)
        if val.rejected:
            return -np.inf, np.zeros(dim)
        return val.logp, val.gradient

    return f, dim


def _run_one_chain(ctx, config, seed_seq):
    rng = np.random.default_rng(seed_seq)
    f, dim = _posterior_callback(ctx, config.mode)
    orient = np.zeros(dim)
    orient[: ctx.n_free] = loading_orientation(ctx.templates)
    u0 = initialize(f, dim, rng, orient)
    draws_u, logps, divergent, accept, depth_hits, seconds = nuts_chain(
        f, u0, config.warmup, config.samples, rng,
        max_treedepth=config.max_treedepth,
        target_accept=config.target_accept,
    )
    k = ctx.n_free
    constrained = np.empty((config.samples, k))
    for i in range(config.samples):
        constrained[i] = ctx.transforms.inverse(draws_u[i, :k])
    return constrained, logps, divergent, float(accept.mean()), depth_hits, seconds


def _worker(args):
    return _run_one_chain(*args)


def run_chains(ctx: ModelContext, config: SamplerConfig) -> DrawsMatrix:
    """Sample all chains; disjoint RNG streams, deterministic by seed.

    SEMBURN_THREADS caps worker processes; unset, chains run across
    available cores.  Results are identical either way because chains
    never share state.
    """
    if ctx.n_free == 0:
        raise SamplerError("model has no free parameters to sample")
    children = np.random.SeedSequence(config.seed).spawn(config.chains)
    jobs = [(ctx, config, child) for child in children]

    threads = int(os.environ.get("SEMBURN_THREADS", "0") or "0")
    if threads <= 0:
        threads = min(config.chains, os.cpu_count() or 1)
    if threads == 1 or config.chains == 1:
        results = [_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_worker, jobs))

    draws = np.stack([r[0] for r in results])
    logp = np.stack([r[1] for r in results])
    divergent = np.stack([r[2] for r in results])
    accept = np.array([r[3] for r in results])
    hits = np.array([r[4] for r in results])
    seconds = np.array([r[5] for r in results])
    return DrawsMatrix(
        draws=draws, logp=logp, divergent=divergent, seconds=seconds,
        param_names=list(ctx.templates.param_names),
        param_classes=list(ctx.templates.param_classes),
        mode=config.mode, accept_rate=accept, depth_hits=hits,
    )
