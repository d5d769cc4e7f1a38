import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semburn.bundled import bundled_model
from semburn.syntax import (
    ModelSyntaxError,
    Modifier,
    build_parameter_table,
    infer_observed,
    parse_model,
    render_parameter_table,
)

HS_MODEL = bundled_model("hs").read_text()
PD_MODEL = bundled_model("pd").read_text()
GROWTH_MODEL = bundled_model("growth").read_text()

HS_OBS = [f"x{i}" for i in range(1, 10)]
PD_OBS = ["x1", "x2", "x3"] + [f"y{i}" for i in range(1, 9)]
GROWTH_OBS = ["T1X1", "T1X2", "T1X3", "T2X1", "T2X2", "T2X3"]


class TestParse:
    def test_operators_and_order(self):
        lines = parse_model("f =~ x1 + x2\ny ~ f\nx1 ~~ x2\nx1 ~ 1")
        assert [ln.op for ln in lines] == ["=~", "~", "~~", "~1"]
        assert lines[0].lhs == "f"
        assert [t for t, _ in lines[0].rhs] == ["x1", "x2"]

    def test_fixed_modifier(self):
        (line,) = parse_model("f =~ 1*x1")
        _, mod = line.rhs[0]
        assert mod == Modifier("fixed", value=1.0)

    def test_negative_and_scientific_fixed_values(self):
        (line,) = parse_model("f =~ -1*x1 + 2.5e-1*x2")
        assert line.rhs[0][1].value == -1.0
        assert line.rhs[1][1].value == 0.25

    def test_equal_modifier_keeps_label(self):
        (line,) = parse_model('f =~ equal("f =~ x1")*x2')
        _, mod = line.rhs[0]
        assert mod.kind == "equal"
        assert mod.label == "f =~ x1"

    def test_na_frees_parameter(self):
        (line,) = parse_model("f =~ NA*x1 + x2")
        assert line.rhs[0][1].kind == "free"

    def test_intercept_form(self):
        (line,) = parse_model("x1 ~ 1")
        assert line.op == "~1"
        (line,) = parse_model("x1 ~ 0*1")
        assert line.op == "~1"
        assert line.rhs[0][1] == Modifier("fixed", value=0.0)

    def test_comments_and_semicolons(self):
        lines = parse_model("f =~ x1 # trailing\n# whole line\n; x1 ~ 1")
        assert len(lines) == 2

    def test_covariance_list_expands_later(self):
        (line,) = parse_model("y2 ~~ y4 + y6")
        assert [t for t, _ in line.rhs] == ["y4", "y6"]

    def test_dangling_plus(self):
        with pytest.raises(ModelSyntaxError, match="dangling"):
            parse_model("f =~ x1 +")

    def test_double_modifier(self):
        with pytest.raises(ModelSyntaxError, match="one modifier"):
            parse_model("f =~ 2*3*x1")

    def test_malformed_modifier(self):
        with pytest.raises(ModelSyntaxError, match="malformed"):
            parse_model("f =~ equals(x)*x1")

    def test_unbalanced_quote(self):
        with pytest.raises(ModelSyntaxError, match="quote"):
            parse_model('f =~ equal("f =~ x1*x2')

    def test_no_operator(self):
        with pytest.raises(ModelSyntaxError, match="operator"):
            parse_model("f x1")

    def test_empty_model(self):
        with pytest.raises(ModelSyntaxError, match="contains no statements"):
            parse_model("# nothing here\n\n")

    def test_constant_in_measurement_rejected(self):
        with pytest.raises(ModelSyntaxError, match="constant 1"):
            parse_model("f =~ 1")

    def test_mixed_intercept_and_regression_rejected(self):
        with pytest.raises(ModelSyntaxError, match="own line"):
            parse_model("y ~ x + 1")


class TestInferObserved:
    def test_pd_order(self):
        assert infer_observed(parse_model(PD_MODEL)) == PD_OBS

    def test_growth_excludes_latents(self):
        names = infer_observed(parse_model(GROWTH_MODEL))
        assert names == GROWTH_OBS


class TestBuildTable:
    def test_hs_free_count(self):
        table = build_parameter_table(parse_model(HS_MODEL), HS_OBS)
        assert table.n_free == 30
        by_class = {}
        for row in table.free_rows():
            by_class[row.klass] = by_class.get(row.klass, 0) + 1
        assert by_class == {
            "loading": 6,
            "resid_sd": 9,
            "latent_sd": 3,
            "latent_cor": 3,
            "intercept": 9,
        }

    def test_hs_latent_covariances_are_free_by_default(self):
        # three latents pairwise covary unless declared otherwise
        table = build_parameter_table(parse_model(HS_MODEL), HS_OBS)
        cors = [r for r in table.rows if r.klass == "latent_cor"]
        assert len(cors) == 3

    def test_pd_free_count(self):
        table = build_parameter_table(parse_model(PD_MODEL), PD_OBS)
        by_class = {}
        for row in table.free_rows():
            by_class[row.klass] = by_class.get(row.klass, 0) + 1
        assert by_class == {
            "loading": 8,
            "path": 3,
            "resid_sd": 11,
            "resid_cor": 6,
            "latent_sd": 3,
            "intercept": 11,
        }
        assert table.n_free == 42

    def test_first_loading_fixed_to_one(self):
        table = build_parameter_table(parse_model(HS_MODEL), HS_OBS)
        row = table.row_for("visual =~ x1")
        assert not row.free and row.value == 1.0 and row.auto_fixed

    def test_first_loading_stays_free_when_na(self):
        table = build_parameter_table(parse_model("f =~ NA*x1 + x2\nf ~~ 1*f"), ["x1", "x2"])
        assert table.row_for("f =~ x1").free
        assert table.row_for("f =~ x2").free

    def test_growth_free_count_and_equalities(self):
        table = build_parameter_table(parse_model(GROWTH_MODEL), GROWTH_OBS)
        assert table.n_free == 15
        dup = table.row_for("COG_T2 =~ T2X2")
        assert dup.free and dup.equal_to == "COG_T1 =~ T1X2"
        # latent indicator line becomes a path with a fixed unit weight
        path = table.row_for("COG_T2 ~ dCOG1")
        assert not path.free and path.value == 1.0

    def test_growth_fixed_zero_latent_variance(self):
        table = build_parameter_table(parse_model(GROWTH_MODEL), GROWTH_OBS)
        row = table.row_for("COG_T2 ~~ COG_T2")
        assert not row.free and row.value == 0.0

    def test_latent_mean_defaults_to_no_row(self):
        table = build_parameter_table(parse_model(HS_MODEL), HS_OBS)
        assert not [r for r in table.rows if r.matrix == "alpha"]

    def test_declared_latent_mean_is_free(self):
        table = build_parameter_table(parse_model(GROWTH_MODEL), GROWTH_OBS)
        assert table.row_for("dCOG1 ~ 1").free

    def test_exogenous_observed_upgrade(self):
        table = build_parameter_table(parse_model("y ~ x1 + x2"), ["y", "x1", "x2"])
        assert set(table.upgraded) == {"y", "x1", "x2"}
        for v in ("y", "x1", "x2"):
            resid = table.row_for(f"{v} ~~ {v}")
            # the observed residual is fixed at zero; variance moved upstream
            assert resid.matrix in ("theta", "psi")
        thetas = [r for r in table.rows if r.matrix == "theta" and r.row == r.col]
        assert all(not r.free and r.value == 0.0 for r in thetas)
        psis = [r for r in table.rows if r.matrix == "psi"]
        # three variances plus the default covariance between the two
        # exogenous regressors
        assert len(psis) == 4 and all(r.free for r in psis)
        offdiag = [r for r in psis if r.row != r.col]
        assert {(r.row, r.col) for r in offdiag} == {("x1", "x2")}
        paths = [r for r in table.rows if r.matrix == "beta"]
        assert {(r.row, r.col) for r in paths} == {("y", "x1"), ("y", "x2")}

    def test_unknown_variable(self):
        with pytest.raises(ModelSyntaxError, match="not observed or latent"):
            build_parameter_table(parse_model("f =~ x1 + zz"), ["x1"])

    def test_duplicate_declaration(self):
        with pytest.raises(ModelSyntaxError, match="declared twice"):
            build_parameter_table(
                parse_model("f =~ x1 + x2\nx1 ~~ x2\nx2 ~~ x1"), ["x1", "x2"]
            )

    def test_equality_to_missing_parameter(self):
        with pytest.raises(ModelSyntaxError, match="does not exist"):
            build_parameter_table(
                parse_model('f =~ x1 + equal("f =~ zz")*x2'), ["x1", "x2"]
            )

    def test_equality_across_classes(self):
        with pytest.raises(ModelSyntaxError, match="crosses parameter classes"):
            build_parameter_table(
                parse_model('f =~ x1 + x2\nx1 ~~ equal("f =~ x2")*x1'), ["x1", "x2"]
            )

    def test_latent_observed_covariance_rejected(self):
        with pytest.raises(ModelSyntaxError, match="not supported"):
            build_parameter_table(parse_model("f =~ x1 + x2\nf ~~ x1"), ["x1", "x2"])

    def test_self_regression_rejected(self):
        with pytest.raises(ModelSyntaxError, match="self-regression"):
            build_parameter_table(parse_model("f =~ x1\nf ~ f"), ["x1"])

    def test_fixed_offdiagonal_is_a_correlation(self):
        with pytest.raises(ModelSyntaxError, match="correlations"):
            build_parameter_table(
                parse_model("f =~ x1 + x2\nx1 ~~ 2.5*x2"), ["x1", "x2"]
            )

    def test_saturated_single_variable(self):
        table = build_parameter_table(parse_model("x ~~ x"), ["x"])
        assert table.latents == []
        assert table.n_free == 2  # variance and intercept


class TestRoundTrip:
    @pytest.mark.parametrize("text,obs", [
        (HS_MODEL, HS_OBS),
        (PD_MODEL, PD_OBS),
        (GROWTH_MODEL, GROWTH_OBS),
        ("y ~ x1 + x2", ["y", "x1", "x2"]),
        ("f =~ NA*x1 + x2\nf ~~ 1*f\nx1 ~ 0*1", ["x1", "x2"]),
    ])
    def test_render_reparse_identity(self, text, obs):
        table = build_parameter_table(parse_model(text), obs)
        rendered = render_parameter_table(table)
        table2 = build_parameter_table(parse_model(rendered), obs)
        sig1 = [r.signature() for r in table.rows]
        sig2 = [r.signature() for r in table2.rows]
        assert sig1 == sig2
        assert table.observed == table2.observed
        assert table.latents == table2.latents

    @settings(max_examples=50, deadline=None)
    @given(
        n_ind=st.integers(min_value=2, max_value=4),
        fix_first=st.booleans(),
        cov=st.booleans(),
    )
    def test_random_single_factor_round_trip(self, n_ind, fix_first, cov):
        obs = [f"v{i}" for i in range(n_ind)]
        first = f"{'1*' if fix_first else 'NA*'}{obs[0]}"
        text = "f =~ " + " + ".join([first] + obs[1:])
        if cov and n_ind >= 2:
            text += f"\n{obs[0]} ~~ {obs[1]}"
        table = build_parameter_table(parse_model(text), obs)
        table2 = build_parameter_table(
            parse_model(render_parameter_table(table)), obs
        )
        assert [r.signature() for r in table.rows] == [r.signature() for r in table2.rows]
