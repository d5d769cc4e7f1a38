"""Sign correction, latent scores, and convergence diagnostics."""

import numpy as np
import pytest
from scipy.stats import norm as norm_dist
from scipy.stats import rankdata

from semburn.data import Dataset
from semburn.likelihood import ModelContext, implied_moments
from semburn.model import assemble
from semburn.posterior import (
    SummaryTable,
    build_sign_rule,
    ess_bulk,
    latent_scores,
    rhat,
    sign_correct,
    summarize,
)
from semburn.priors import default_priors
from semburn.sampler import DrawsMatrix
from semburn.syntax import build_parameter_table, infer_observed, parse_model

from .test_likelihood import templates_from

TWO_FACTOR = """
f1 =~ NA*y1 + y2 + y3
f2 =~ NA*y4 + y5 + y6
f1 ~~ 1*f1
f2 ~~ 1*f2
f1 ~~ f2
"""

PATH_FACTOR = """
f1 =~ NA*y1 + y2
f2 =~ NA*y3 + y4
f2 ~ f1
f1 ~~ 1*f1
f2 ~~ 1*f2
"""


def context_for(text, rows, seed=0):
    t = templates_from(text)
    rng = np.random.default_rng(seed)
    theta = base_theta(t, rng)
    data = simulate_rows(t, theta, rows, rng)
    ctx = ModelContext.build(t, data, default_priors(t))
    return ctx, theta


def base_theta(t, rng):
    theta = np.empty(t.n_free)
    for k, klass in enumerate(t.param_classes):
        if klass in ("loading", "path"):
            theta[k] = rng.uniform(0.6, 1.2)
        elif klass in ("resid_sd", "latent_sd"):
            theta[k] = rng.uniform(0.5, 1.1)
        elif klass in ("resid_cor", "latent_cor"):
            theta[k] = rng.uniform(-0.25, 0.3)
        else:
            theta[k] = rng.normal(0.0, 0.8)
    return theta


def simulate_rows(t, theta, n, rng):
    from semburn.likelihood import StructureFlags

    sm = assemble(t, theta)
    mom = implied_moments(sm, StructureFlags(False, False, False, None))
    z = rng.standard_normal((n, t.p))
    values = mom.mu + z @ mom.chol_sigma.T
    return Dataset(columns=list(t.observed), values=values)


def moments_of(t, theta):
    from semburn.likelihood import StructureFlags

    sm = assemble(t, theta)
    return implied_moments(sm, StructureFlags(False, False, False, None))


def reflect(t, theta, latent):
    """Hand-built reflection of one latent in free-parameter space."""
    out = theta.copy()
    for k in range(t.n_free):
        flips = 0
        for idx in (t.lambda_idx,):
            hits = np.argwhere(idx == k)
            for r, c in hits:
                if c == latent:
                    flips += 1
        for idx in (t.b_idx, t.latent_cor_idx):
            hits = np.argwhere(idx == k)
            for r, c in hits:
                if (r == latent) != (c == latent):
                    flips += 1
        hits = np.nonzero(t.alpha_idx == k)[0]
        for r in hits:
            if r == latent:
                flips += 1
        if flips % 2:
            out[k] = -out[k]
    return out


def wrap_draws(t, thetas, seconds=1.0):
    arr = np.asarray(thetas)[None, :, :]
    c, s, _ = arr.shape
    return DrawsMatrix(
        draws=arr,
        logp=np.zeros((c, s)),
        divergent=np.zeros((c, s), dtype=bool),
        seconds=np.array([seconds]),
        param_names=list(t.param_names),
        param_classes=list(t.param_classes),
    )


class TestSignRule:
    def test_variance_scaled_latents_get_rules(self):
        t = templates_from(TWO_FACTOR)
        rule = build_sign_rule(t)
        assert set(rule.focal) == {0, 1}
        for j, k in rule.focal.items():
            assert t.param_classes[k] == "loading"
            r, c = np.argwhere(t.lambda_idx == k)[0]
            assert c == j

    def test_standard_scaling_has_no_rule(self):
        t = templates_from("f =~ y1 + y2 + y3")
        rule = build_sign_rule(t)
        assert not rule.active
        assert rule.focal == {}

    def test_fixed_nonzero_loading_blocks_rule(self):
        t = templates_from("f =~ NA*y1 + 1*y2 + y3\nf ~~ 1*f")
        rule = build_sign_rule(t)
        assert not rule.active

    def test_focal_is_first_free_loading(self):
        t = templates_from(TWO_FACTOR)
        rule = build_sign_rule(t)
        first = np.argwhere(t.lambda_idx[:, 0] >= 0).ravel()[0]
        assert rule.focal[0] == t.lambda_idx[first, 0]


class TestSignCorrect:
    def setup_method(self):
        self.t = templates_from(TWO_FACTOR)
        self.rule = build_sign_rule(self.t)
        rng = np.random.default_rng(7)
        base = base_theta(self.t, rng)
        # make every focal loading positive so the base draw is the target
        for j, k in self.rule.focal.items():
            base[k] = abs(base[k])
        self.base = base

    def test_reflections_fold_back_to_base(self):
        t, base = self.t, self.base
        thetas = [
            base,
            reflect(t, base, 0),
            reflect(t, base, 1),
            reflect(t, reflect(t, base, 0), 1),
        ]
        fixed = sign_correct(wrap_draws(t, thetas), self.rule)
        flat = fixed.stacked()
        for row in flat:
            np.testing.assert_allclose(row, base, rtol=0, atol=0)

    def test_moments_invariant_draw_by_draw(self):
        t, base = self.t, self.base
        thetas = [reflect(t, base, 0), reflect(t, reflect(t, base, 0), 1)]
        raw = wrap_draws(t, thetas)
        fixed = sign_correct(raw, self.rule)
        for before, after in zip(raw.stacked(), fixed.stacked()):
            mb = moments_of(t, before)
            ma = moments_of(t, after)
            np.testing.assert_allclose(ma.sigma, mb.sigma, atol=1e-12)
            np.testing.assert_allclose(ma.mu, mb.mu, atol=1e-12)

    def test_idempotent(self):
        t, base = self.t, self.base
        thetas = [reflect(t, base, 0), base, reflect(t, base, 1)]
        once = sign_correct(wrap_draws(t, thetas), self.rule)
        twice = sign_correct(once, self.rule)
        assert np.array_equal(once.draws, twice.draws)

    def test_all_positive_draws_bit_identical(self):
        t, base = self.t, self.base
        raw = wrap_draws(t, [base, base])
        fixed = sign_correct(raw, self.rule)
        assert np.array_equal(fixed.draws, raw.draws)

    def test_double_flip_leaves_covariance_sign(self):
        t, base = self.t, self.base
        both = reflect(t, reflect(t, base, 0), 1)
        cor_k = next(
            k for k, c in enumerate(t.param_classes) if c == "latent_cor"
        )
        assert both[cor_k] == base[cor_k]
        fixed = sign_correct(wrap_draws(t, [both]), self.rule)
        assert fixed.stacked()[0, cor_k] == base[cor_k]

    def test_path_column_flips_with_source_latent(self):
        t = templates_from(PATH_FACTOR)
        rule = build_sign_rule(t)
        assert set(rule.focal) == {0, 1}
        rng = np.random.default_rng(3)
        base = base_theta(t, rng)
        for j, k in rule.focal.items():
            base[k] = abs(base[k])
        flipped = reflect(t, base, 0)
        path_k = t.param_classes.index("path")
        assert flipped[path_k] == -base[path_k]
        fixed = sign_correct(wrap_draws(t, [flipped]), rule)
        np.testing.assert_allclose(fixed.stacked()[0], base, atol=0)
        mb = moments_of(t, base)
        mf = moments_of(t, flipped)
        np.testing.assert_allclose(mf.sigma, mb.sigma, atol=1e-12)

    def test_inactive_rule_returns_input(self):
        t = templates_from("f =~ y1 + y2 + y3")
        rule = build_sign_rule(t)
        rng = np.random.default_rng(11)
        raw = wrap_draws(t, [base_theta(t, rng)])
        assert sign_correct(raw, rule) is raw


class _QueuedRng:
    """Stands in for a Generator, returning preset standard normals."""

    def __init__(self, maker):
        self.maker = maker

    def standard_normal(self, shape):
        return self.maker(shape)


class TestLatentScores:
    def test_matches_joint_conditional(self):
        from semburn.verify import joint_conditional

        text = "f =~ NA*y1 + y2 + y3\nf ~~ 1*f"
        ctx, theta = context_for(text, rows=6, seed=5)
        draws = wrap_draws(ctx.templates, [theta])
        zero_rng = _QueuedRng(lambda shape: np.zeros(shape))
        scores = latent_scores(draws, ctx, zero_rng)
        sm = assemble(ctx.templates, theta)
        for i in range(ctx.dataset.n):
            mean, _ = joint_conditional(sm, ctx.dataset.values[i])
            np.testing.assert_allclose(scores[0, i], mean, atol=1e-10)

    def test_conditional_root_matches_joint_conditional(self):
        from semburn.verify import joint_conditional

        text = "f1 =~ NA*y1 + y2\nf2 =~ NA*y3 + y4\nf1 ~~ 1*f1\nf2 ~~ 1*f2\nf1 ~~ f2"
        ctx, theta = context_for(text, rows=4, seed=9)
        t = ctx.templates
        draws = wrap_draws(t, [theta])
        zero = latent_scores(draws, ctx, _QueuedRng(lambda s: np.zeros(s)))
        cols = []
        for k in range(t.m):
            basis = np.zeros(t.m)
            basis[k] = 1.0
            rng = _QueuedRng(lambda s, b=basis: np.tile(b, (s[0], 1)))
            shifted = latent_scores(draws, ctx, rng)
            cols.append(shifted[0, 0] - zero[0, 0])
        root = np.stack(cols, axis=1)
        sm = assemble(t, theta)
        _, cov = joint_conditional(sm, ctx.dataset.values[0])
        np.testing.assert_allclose(root @ root.T, cov, atol=1e-10)

    def test_perfect_indicator_pins_score_to_data(self):
        text = "f =~ 1*y1\ny1 ~~ 0.000001*y1\nf ~~ f\ny1 ~ 0*1"
        t = templates_from(text)
        data = Dataset(columns=["y1"], values=np.array([[0.4], [-1.2], [2.0]]))
        ctx = ModelContext.build(t, data, default_priors(t))
        draws = wrap_draws(t, [np.array([1.0])])
        rng = np.random.default_rng(0)
        scores = latent_scores(draws, ctx, rng)
        np.testing.assert_allclose(
            scores[0, :, 0], data.values[:, 0], atol=1e-2
        )
        assert np.all(np.abs(scores[0, :, 0] - data.values[:, 0]) < 0.01)

    def test_conjugate_mean_and_variance(self):
        text = "f =~ 1*y1\ny1 ~~ 1*y1\nf ~~ 1*f\ny1 ~ 0*1"
        t = templates_from(text)
        assert t.n_free == 0
        data = Dataset(columns=["y1"], values=np.array([[2.0]]))
        ctx = ModelContext.build(t, data, default_priors(t))
        draws = wrap_draws(t, [np.empty(0)])
        rng = np.random.default_rng(42)
        pulls = np.array([
            latent_scores(draws, ctx, rng)[0, 0, 0] for _ in range(4000)
        ])
        assert abs(pulls.mean() - 1.0) < 0.05
        assert abs(pulls.var(ddof=1) - 0.5) < 0.05

    def test_pooled_scores_match_marginal_latent_variance(self):
        text = "f =~ NA*y1 + y2 + y3\nf ~~ 1*f"
        ctx, theta = context_for(text, rows=4000, seed=13)
        draws = wrap_draws(ctx.templates, [theta])
        rng = np.random.default_rng(99)
        scores = latent_scores(draws, ctx, rng)[0, :, 0]
        assert abs(scores.var(ddof=1) - 1.0) < 0.1

    def test_missing_cells_condition_on_observed_only(self):
        from semburn.verify import joint_conditional

        text = "f =~ NA*y1 + y2 + y3\nf ~~ 1*f"
        t = templates_from(text)
        rng = np.random.default_rng(1)
        theta = base_theta(t, rng)
        values = simulate_rows(t, theta, 5, rng).values
        values[0, 1] = np.nan
        values[3, 0] = np.nan
        data = Dataset(columns=list(t.observed), values=values)
        ctx = ModelContext.build(t, data, default_priors(t))
        draws = wrap_draws(t, [theta])
        scores = latent_scores(draws, ctx, _QueuedRng(lambda s: np.zeros(s)))
        sm = assemble(t, theta)
        for i in range(5):
            mean, _ = joint_conditional(sm, values[i])
            np.testing.assert_allclose(scores[0, i], mean, atol=1e-10)


def reference_rhat(x):
    """Straight transcription of the rank-normalized split formula."""
    c, n = x.shape
    half = n // 2
    z = np.concatenate([x[:, :half], x[:, half:2 * half]], axis=0)

    def normalize(a):
        r = rankdata(a).reshape(a.shape)
        return norm_dist.ppf((r - 0.375) / (a.size + 0.25))

    def classic(a):
        m = a.shape[1]
        w = np.mean(a.var(axis=1, ddof=1))
        b = m * np.var(a.mean(axis=1), ddof=1)
        return np.sqrt(((m - 1) / m * w + b / m) / w)

    bulk = classic(normalize(z))
    folded = classic(normalize(np.abs(z - np.median(z))))
    return max(bulk, folded, classic(z))


class TestRhat:
    def test_matches_reference_formula(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((3, 26)) + np.array([[0.0], [0.2], [-0.1]])
        value, flag = rhat(x)
        assert not flag
        assert value == pytest.approx(reference_rhat(x), abs=1e-12)

    def test_identical_white_noise_near_one(self):
        rng = np.random.default_rng(5)
        chain = rng.standard_normal(500)
        x = np.stack([chain, chain.copy()])
        value, flag = rhat(x)
        assert not flag
        assert 0.99 <= value <= 1.01

    def test_offset_chains_flagged_large(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal(400)
        x = np.stack([a, a + 10.0])
        value, _ = rhat(x)
        assert value > 2.0

    def test_constant_parameter_degenerate(self):
        x = np.full((2, 100), 3.5)
        value, flag = rhat(x)
        assert value == 1.0
        assert flag

    def test_too_few_draws_degenerate(self):
        x = np.array([[1.0, 2.0, 3.0]])
        value, flag = rhat(x)
        assert value == 1.0
        assert flag


class TestEssBulk:
    def test_iid_close_to_draw_count(self):
        rng = np.random.default_rng(30)
        x = rng.standard_normal((4, 1000))
        value, flag = ess_bulk(x)
        assert not flag
        assert 0.75 * 4000 <= value <= 1.25 * 4000

    def test_ar1_matches_analytic_rate(self):
        rng = np.random.default_rng(31)
        phi = 0.9
        chains = []
        for _ in range(4):
            e = rng.standard_normal(2000) * np.sqrt(1 - phi**2)
            chain = np.empty(2000)
            chain[0] = rng.standard_normal()
            for i in range(1, 2000):
                chain[i] = phi * chain[i - 1] + e[i]
            chains.append(chain)
        x = np.stack(chains)
        value, _ = ess_bulk(x)
        expected = 8000 * (1 - phi) / (1 + phi)
        assert expected / 1.5 <= value <= expected * 1.5

    def test_antithetic_chain_exceeds_draw_count(self):
        rng = np.random.default_rng(32)
        e = rng.standard_normal(500)
        chain = np.empty(1000)
        chain[0::2] = e
        chain[1::2] = -e
        value, _ = ess_bulk(chain[None, :])
        assert value > 1000

    def test_constant_degenerate(self):
        value, flag = ess_bulk(np.full((2, 50), 1.0))
        assert np.isnan(value)
        assert flag


class TestSummarize:
    def make_draws(self, rng, chains=2, samples=200, k=3, seconds=(2.0, 3.0)):
        arr = rng.standard_normal((chains, samples, k)) + np.arange(k)
        return DrawsMatrix(
            draws=arr,
            logp=np.zeros((chains, samples)),
            divergent=np.zeros((chains, samples), dtype=bool),
            seconds=np.asarray(seconds, dtype=float),
            param_names=[f"p{i}" for i in range(k)],
            param_classes=["loading"] * k,
        )

    def test_moment_columns_match_numpy(self):
        rng = np.random.default_rng(40)
        dm = self.make_draws(rng)
        table = summarize(dm)
        flat = dm.stacked()
        np.testing.assert_allclose(table.mean, flat.mean(axis=0))
        np.testing.assert_allclose(table.sd, flat.std(axis=0, ddof=1))
        np.testing.assert_allclose(
            table.q50, np.percentile(flat, 50, axis=0)
        )
        assert table.names == ["p0", "p1", "p2"]

    def test_ess_per_second_uses_summed_chain_time(self):
        rng = np.random.default_rng(41)
        dm = self.make_draws(rng, seconds=(2.0, 3.0))
        table = summarize(dm)
        np.testing.assert_allclose(
            table.ess_per_sec, table.ess_bulk / 5.0
        )

    def test_healthy_chains_have_sane_diagnostics(self):
        rng = np.random.default_rng(42)
        dm = self.make_draws(rng, chains=4, samples=250)
        table = summarize(dm)
        total = 4 * 250
        assert np.all(table.rhat >= 1.0 - 1e-8)
        assert np.all(table.rhat < 1.02)
        assert np.all(table.ess_bulk <= 1.5 * total)
        assert np.all(table.ess_bulk > 0.5 * total)
        assert not table.degenerate.any()

    def test_single_sample_collapses_quantiles(self):
        dm = DrawsMatrix(
            draws=np.array([[[1.5, -2.0]]]),
            logp=np.zeros((1, 1)),
            divergent=np.zeros((1, 1), dtype=bool),
            seconds=np.array([1.0]),
            param_names=["a", "b"],
            param_classes=["loading", "loading"],
        )
        table = summarize(dm)
        np.testing.assert_allclose(table.q5, [1.5, -2.0])
        np.testing.assert_allclose(table.q50, [1.5, -2.0])
        np.testing.assert_allclose(table.q95, [1.5, -2.0])
        assert table.degenerate.all()
        assert np.all(table.sd == 0.0)

    def test_rows_iterate_in_parameter_order(self):
        rng = np.random.default_rng(43)
        dm = self.make_draws(rng)
        rows = list(summarize(dm).rows())
        assert [r["param"] for r in rows] == ["p0", "p1", "p2"]
        assert set(rows[0]) == {
            "param", "mean", "sd", "q5", "q50", "q95",
            "rhat", "ess_bulk", "ess_per_sec",
        }
