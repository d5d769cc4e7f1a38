"""Bayesian structural equation models on the marginal likelihood."""

from semburn.bundled import bundled_data, bundled_model
from semburn.data import DataError, Dataset, group_patterns, load_csv
from semburn.likelihood import (
    ImpliedMoments,
    LikelihoodValue,
    ModelContext,
    conditional_loglik,
    implied_moments,
    loglik_grad,
    marginal_loglik,
    maximize_marginal_loglik,
    posterior_logp_grad,
)
from semburn.model import (
    MatrixTemplates,
    ModelBuildError,
    SemMatrices,
    StructureFlags,
    analyze_structure,
    assemble,
    build_templates,
    extract_free,
)
from semburn.posterior import (
    SignRule,
    SummaryTable,
    build_sign_rule,
    ess_bulk,
    latent_scores,
    rhat,
    sign_correct,
    summarize,
)
from semburn.priors import (
    PriorError,
    PriorSet,
    PriorSpec,
    Transforms,
    default_priors,
    parse_prior_rules,
    sample_prior,
)
from semburn.sampler import (
    DrawsMatrix,
    SamplerConfig,
    SamplerError,
    run_chains,
)
from semburn.sbc import (
    SbcConfig,
    SbcResult,
    generate_prior_dataset,
    rank_statistic,
    run_sbc,
    uniformity_check,
)
from semburn.syntax import (
    ModelSyntaxError,
    ParameterTable,
    build_parameter_table,
    infer_observed,
    parse_model,
    render_parameter_table,
)

__version__ = "0.1.0"

__all__ = [
    "bundled_data",
    "bundled_model",
    "DataError",
    "Dataset",
    "group_patterns",
    "load_csv",
    "ImpliedMoments",
    "LikelihoodValue",
    "ModelContext",
    "conditional_loglik",
    "implied_moments",
    "loglik_grad",
    "marginal_loglik",
    "maximize_marginal_loglik",
    "posterior_logp_grad",
    "MatrixTemplates",
    "ModelBuildError",
    "SemMatrices",
    "StructureFlags",
    "analyze_structure",
    "assemble",
    "build_templates",
    "extract_free",
    "SignRule",
    "SummaryTable",
    "build_sign_rule",
    "ess_bulk",
    "latent_scores",
    "rhat",
    "sign_correct",
    "summarize",
    "PriorError",
    "PriorSet",
    "PriorSpec",
    "Transforms",
    "default_priors",
    "parse_prior_rules",
    "sample_prior",
    "DrawsMatrix",
    "SamplerConfig",
    "SamplerError",
    "run_chains",
    "SbcConfig",
    "SbcResult",
    "generate_prior_dataset",
    "rank_statistic",
    "run_sbc",
    "uniformity_check",
    "ModelSyntaxError",
    "ParameterTable",
    "build_parameter_table",
    "infer_observed",
    "parse_model",
    "render_parameter_table",
    "__version__",
]
