"""Priors and unconstrained-scale transforms.

Every free parameter gets an independent prior.  Location-type
parameters (intercepts, latent means, loadings, paths) take normal
priors parameterized by mean and standard deviation and are sampled on
their natural scale.  Scale parameters are standard deviations inside
the model but may carry their gamma prior on the sd, variance or
precision scale; sampling happens on log(sd) either way, with the
appropriate change-of-variable term.  Correlations take a beta prior on
(rho + 1) / 2 and are sampled on u = 2 * atanh(rho), whose inverse is
rho = tanh(u / 2); that rescaled transform keeps the round-trip exact to
well below 1e-10 across u in [-10, 10], which plain atanh cannot do in
double precision.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import fnmatch

import numpy as np
from scipy.special import betaln, expit, gammaln

from .model import MatrixTemplates

__all__ = [
    "PriorError",
    "PriorSpec",
    "PriorSet",
    "Transforms",
    "default_priors",
    "parse_prior_rules",
    "log_prior",
    "log_prior_grad",
    "sample_prior",
]

_LOG2 = float(np.log(2.0))

# class -> transform tag
_TRANSFORM_FOR_CLASS = {
    "intercept": "identity",
    "latent_mean": "identity",
    "loading": "identity",
    "path": "identity",
    "resid_sd": "log",
    "latent_sd": "log",
    "resid_cor": "cor",
    "latent_cor": "cor",
}

_LOCATION_CLASSES = ("intercept", "latent_mean", "loading", "path")
_SD_CLASSES = ("resid_sd", "latent_sd")
_COR_CLASSES = ("resid_cor", "latent_cor")


class PriorError(ValueError):
    """Invalid prior family, hyperparameters, or rule file."""


@dataclass(frozen=True)
class PriorSpec:
    """One family with its two hyperparameters.

    normal(mean, sd) for location parameters, gamma(shape, rate) for
    scale parameters, beta(a, b) on (rho + 1) / 2 for correlations.
    """

    family: str
    a: float
    b: float

    def __post_init__(self):
        if self.family not in ("normal", "gamma", "beta"):
            raise PriorError(f"unknown prior family {self.family!r}")
        if self.family == "normal" and self.b <= 0:
            raise PriorError("normal prior needs a positive sd")
        if self.family in ("gamma", "beta") and (self.a <= 0 or self.b <= 0):
            raise PriorError(f"{self.family} prior needs positive hyperparameters")


_COMPATIBLE = {
    "identity": ("normal",),
    "log": ("gamma",),
    "cor": ("beta",),
}


@dataclass
class PriorSet:
    """Per-parameter priors plus the scale-parameterization choice.

    ``scale_param`` says which function of a scale parameter the gamma
    prior describes: the sd itself, the variance, or the precision.
    """

    specs: list[PriorSpec]
    classes: list[str]
    scale_param: str = "sd"

    def __post_init__(self):
        if self.scale_param not in ("sd", "var", "prec"):
            raise PriorError(f"unknown scale parameterization {self.scale_param!r}")
        if len(self.specs) != len(self.classes):
            raise PriorError("one prior per free parameter is required")
        for spec, klass in zip(self.specs, self.classes):
            tag = _TRANSFORM_FOR_CLASS[klass]
            if spec.family not in _COMPATIBLE[tag]:
                raise PriorError(
                    f"{spec.family} prior is not usable for class {klass!r}"
                )
        self._a = np.array([s.a for s in self.specs])
        self._b = np.array([s.b for s in self.specs])


_DEFAULT = {
    "intercept": PriorSpec("normal", 0.0, 32.0),
    "latent_mean": PriorSpec("normal", 0.0, 32.0),
    "loading": PriorSpec("normal", 0.0, 10.0),
    "path": PriorSpec("normal", 0.0, 10.0),
    "resid_sd": PriorSpec("gamma", 1.0, 0.5),
    "latent_sd": PriorSpec("gamma", 1.0, 0.5),
    "resid_cor": PriorSpec("beta", 1.0, 1.0),
    "latent_cor": PriorSpec("beta", 1.0, 1.0),
}

_INFORMATIVE = dict(_DEFAULT) | {
    "loading": PriorSpec("normal", 1.25, 0.25),
    "path": PriorSpec("normal", 1.5, 0.25),
    "resid_sd": PriorSpec("gamma", 10.0, 10.0),
    "latent_sd": PriorSpec("gamma", 10.0, 10.0),
    "resid_cor": PriorSpec("beta", 5.0, 5.0),
    "latent_cor": PriorSpec("beta", 5.0, 5.0),
}


def default_priors(
    t: MatrixTemplates,
    informative: bool = False,
    scale_param: str = "sd",
    rules: list[tuple[tuple[str, ...], str, PriorSpec]] | None = None,
) -> PriorSet:
    """Build the built-in prior set, optionally overridden by rules.

    Each rule is (classes, name-pattern, spec); patterns are shell-style
    globs matched against canonical parameter names, and later rules win.
    A rule that matches no free parameter at all is treated as a typo.
    """
    table = _INFORMATIVE if informative else _DEFAULT
    specs = [table[k] for k in t.param_classes]
    if rules:
        for klasses, pattern, spec in rules:
            hit = False
            for i, (k, name) in enumerate(zip(t.param_classes, t.param_names)):
                if k in klasses and fnmatch.fnmatch(name, pattern):
                    specs[i] = spec
                    hit = True
            if not hit:
                raise PriorError(
                    f"prior rule for {'/'.join(klasses)} pattern {pattern!r} "
                    f"matches no free parameter"
                )
    return PriorSet(specs, list(t.param_classes), scale_param)


_CLASS_ALIASES = {
    "intercept": "intercept", "nu": "intercept",
    "latent_mean": "latent_mean", "alpha": "latent_mean",
    "loading": "loading", "lambda": "loading",
    "path": "path", "beta": "path",
    "resid_sd": "resid_sd", "theta": "resid_sd", "theta_sd": "resid_sd",
    "latent_sd": "latent_sd", "psi": "latent_sd", "psi_sd": "latent_sd",
    "resid_cor": "resid_cor", "theta_cor": "resid_cor",
    "latent_cor": "latent_cor", "psi_cor": "latent_cor",
}

_RULE_RE = re.compile(
    r"^\s*([A-Za-z_]+)\s*(?:\(\s*([^)]*?)\s*\))?\s+"
    r"(normal|gamma|beta)\s*\(\s*([^,\s]+)\s*,\s*([^)\s]+)\s*\)\s*$"
)


def parse_prior_rules(text: str) -> list[tuple[tuple[str, ...], str, PriorSpec]]:
    """Parse prior override rules, one per line.

    Format: ``class family(h1, h2)`` with an optional name pattern, e.g.
    ``loading normal(1.25, 0.25)`` or ``resid_sd(x1 ~~ x1) gamma(2, 1)``.
    Lavaan-style class aliases (lambda, beta, theta, psi, ...) and the
    shorthands ``rho`` (all correlations) and ``sd`` (all standard
    deviations) are accepted.
    """
    rules: list[tuple[tuple[str, ...], str, PriorSpec]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _RULE_RE.match(line)
        if not m:
            raise PriorError(f"line {lineno}: cannot parse prior rule {raw.strip()!r}")
        klass_raw, pattern, family, h1, h2 = m.groups()
        try:
            spec = PriorSpec(family, float(h1), float(h2))
        except ValueError:
            raise PriorError(f"line {lineno}: bad hyperparameters in {raw.strip()!r}")
        pattern = pattern or "*"
        klass_raw = klass_raw.lower()
        if klass_raw == "rho":
            targets = _COR_CLASSES
        elif klass_raw == "sd":
            targets = _SD_CLASSES
        elif klass_raw in _CLASS_ALIASES:
            targets = (_CLASS_ALIASES[klass_raw],)
        else:
            raise PriorError(f"line {lineno}: unknown parameter class {klass_raw!r}")
        rules.append((targets, pattern, spec))
    return rules


class Transforms:
    """Vectorized map between constrained and unconstrained scales.

    ``inverse`` takes the sampling scale u to the constrained scale c
    (identity, exp, or tanh(u/2)); ``forward`` inverts it.  The class
    list fixes which transform applies to each position.
    """

    def __init__(self, classes: list[str]):
        tags = np.array([_TRANSFORM_FOR_CLASS[k] for k in classes])
        self.identity = tags == "identity"
        self.log = tags == "log"
        self.cor = tags == "cor"
        self.dim = len(classes)

    # largest double strictly below 1: keeps correlations in the open
    # interval even for extreme u, where tanh rounds to exactly 1
    _COR_LIM = float(np.nextafter(1.0, 0.0))

    def inverse(self, u: np.ndarray) -> np.ndarray:
        c = np.array(u, dtype=float)
        c[self.log] = np.exp(u[self.log])
        c[self.cor] = np.clip(np.tanh(0.5 * u[self.cor]), -self._COR_LIM, self._COR_LIM)
        return c

    def forward(self, c: np.ndarray) -> np.ndarray:
        u = np.array(c, dtype=float)
        with np.errstate(divide="ignore"):
            u[self.log] = np.log(c[self.log])
        u[self.cor] = 2.0 * np.arctanh(c[self.cor])
        return u

    def inverse_with_grad(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Constrained values and the diagonal Jacobian dc/du."""
        c = self.inverse(u)
        dcdu = np.ones_like(c)
        dcdu[self.log] = c[self.log]
        dcdu[self.cor] = 0.5 * (1.0 - c[self.cor] ** 2)
        return c, dcdu


def log_prior(ps: PriorSet, tr: Transforms, u: np.ndarray) -> float:
    """Log density of the prior pushed to the unconstrained scale.

    Includes all change-of-variable terms, so exp(log_prior) integrates
    to one over u.
    """
    val, _ = _log_prior_impl(ps, tr, u, want_grad=False)
    return val


def log_prior_grad(ps: PriorSet, tr: Transforms, u: np.ndarray) -> tuple[float, np.ndarray]:
    return _log_prior_impl(ps, tr, u, want_grad=True)


def _log_prior_impl(ps, tr, u, want_grad):
    a, b = ps._a, ps._b
    u = np.asarray(u, dtype=float)
    val = 0.0
    grad = np.zeros_like(u) if want_grad else None

    ident = tr.identity
    if ident.any():
        mu, sd = a[ident], b[ident]
        z = (u[ident] - mu) / sd
        val += float(np.sum(-0.5 * z * z - np.log(sd) - 0.5 * np.log(2 * np.pi)))
        if want_grad:
            grad[ident] = -z / sd

    if tr.log.any():
        # gamma prior on t = exp(e * u) where e depends on the scale choice
        e = {"sd": 1.0, "var": 2.0, "prec": -2.0}[ps.scale_param]
        shape, rate = a[tr.log], b[tr.log]
        q = e * u[tr.log]
        val += float(np.sum(
            shape * np.log(rate) - gammaln(shape) + shape * q - rate * np.exp(q)
            + np.log(abs(e))
        ))
        if want_grad:
            grad[tr.log] = e * (shape - rate * np.exp(q))

    if tr.cor.any():
        # beta prior on x = (rho + 1) / 2 = logistic(u); log x and
        # log(1 - x) are written with logaddexp so the tails stay finite
        aa, bb = a[tr.cor], b[tr.cor]
        uu = u[tr.cor]
        x = expit(uu)
        val += float(np.sum(
            -aa * np.logaddexp(0.0, -uu) - bb * np.logaddexp(0.0, uu)
            - betaln(aa, bb)
        ))
        if want_grad:
            grad[tr.cor] = aa * (1.0 - x) - bb * x

    return val, grad


def sample_prior(ps: PriorSet, rng: np.random.Generator) -> np.ndarray:
    """Draw one constrained-scale parameter vector from the prior.

    Parameters are drawn one at a time in index order so a given seed
    always produces the same vector.
    """
    out = np.empty(len(ps.specs))
    for i, (spec, klass) in enumerate(zip(ps.specs, ps.classes)):
        if spec.family == "normal":
            out[i] = rng.normal(spec.a, spec.b)
        elif spec.family == "gamma":
            t = rng.gamma(spec.a, 1.0 / spec.b)
            if ps.scale_param == "sd":
                out[i] = t
            elif ps.scale_param == "var":
                out[i] = np.sqrt(t)
            else:
                out[i] = 1.0 / np.sqrt(t)
        else:
            out[i] = 2.0 * rng.beta(spec.a, spec.b) - 1.0
    return out
