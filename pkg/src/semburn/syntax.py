"""Model description language for latent variable models.

The dialect follows the lavaan conventions: one statement per line,
with three operators and an intercept form.

    f =~ x1 + x2 + x3      measurement (f is latent, x* load on it)
    y ~ x1 + x2            regression
    a ~~ b                 (co)variance
    x ~ 1                  intercept

Right-hand terms accept at most one modifier: a numeric value fixes the
parameter (``1*x1``), ``equal("label")`` constrains it equal to another
parameter named by its canonical label, and ``NA`` explicitly frees a
parameter that a default rule would otherwise fix.

``parse_model`` turns text into :class:`ModelLine` records and
``build_parameter_table`` expands those into one row per model parameter,
applying the defaults (free residual variances and intercepts, fixed
first loadings, latent intercepts fixed at zero) and upgrading observed
variables that appear in regressions to single-indicator latents.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

__all__ = [
    "ModelSyntaxError",
    "Modifier",
    "ModelLine",
    "ParamRow",
    "ParameterTable",
    "parse_model",
    "infer_observed",
    "build_parameter_table",
    "render_parameter_table",
]

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*\Z")
_NUM_RE = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?\Z")
_EQUAL_RE = re.compile(r'equal\(\s*"([^"]+)"\s*\)\Z')

# Parameter classes, in the order free indices are assigned.
CLASS_ORDER = (
    "loading",
    "path",
    "resid_sd",
    "resid_cor",
    "latent_sd",
    "latent_cor",
    "intercept",
    "latent_mean",
)


class ModelSyntaxError(ValueError):
    """Malformed model text or an inconsistent set of declarations."""


@dataclass(frozen=True)
class Modifier:
    """Single right-hand-side modifier: none, fixed(value), equal(label) or free."""

    kind: str = "none"  # none | fixed | equal | free
    value: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("none", "fixed", "equal", "free"):
            raise ValueError(f"unknown modifier kind {self.kind!r}")


@dataclass(frozen=True)
class ModelLine:
    """One parsed statement: lhs, operator, and (target, modifier) terms.

    The operator is one of ``=~``, ``~``, ``~~`` or ``~1``; intercept
    statements use the ``~1`` tag and carry the single target ``"1"``.
    """

    lhs: str
    op: str
    rhs: tuple[tuple[str, Modifier], ...]


@dataclass
class ParamRow:
    """One model parameter (one matrix slot).

    ``matrix`` is one of nu, alpha, lambda, beta, theta, psi.  For theta
    and psi, ``row == col`` rows hold variances (the fixed ``value`` is a
    variance) and off-diagonal rows hold correlations.  ``equal_to`` names
    the representative parameter when this row is equality-constrained.
    ``auto_added`` marks rows created by default rules or upgrades rather
    than by an explicit statement; ``auto_fixed`` marks a declared first
    loading that received the default fixed-to-1 scaling.
    """

    matrix: str
    row: str
    col: str
    free: bool
    value: float
    label: str
    equal_to: str | None = None
    auto_added: bool = False
    auto_fixed: bool = False

    @property
    def klass(self) -> str:
        if self.matrix == "nu":
            return "intercept"
        if self.matrix == "alpha":
            return "latent_mean"
        if self.matrix == "lambda":
            return "loading"
        if self.matrix == "beta":
            return "path"
        diag = self.row == self.col
        if self.matrix == "theta":
            return "resid_sd" if diag else "resid_cor"
        if self.matrix == "psi":
            return "latent_sd" if diag else "latent_cor"
        raise ValueError(f"unknown matrix {self.matrix!r}")

    def signature(self) -> tuple:
        """Semantic identity, ignoring provenance flags and label spelling."""
        value = None if math.isnan(self.value) else self.value
        return (self.matrix, self.row, self.col, self.free, value, self.equal_to)


@dataclass
class ParameterTable:
    """Flat list of parameter rows plus the variable namespaces."""

    rows: list[ParamRow]
    observed: list[str]
    latents: list[str]
    upgraded: list[str] = field(default_factory=list)

    @property
    def n_free(self) -> int:
        return sum(1 for r in self.rows if r.free and r.equal_to is None)

    def free_rows(self) -> list[ParamRow]:
        return [r for r in self.rows if r.free and r.equal_to is None]

    def row_for(self, label: str) -> ParamRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def _strip_comment(line: str) -> str:
    out = []
    in_quote = False
    for ch in line:
        if ch == '"':
            in_quote = not in_quote
        if ch == "#" and not in_quote:
            break
        out.append(ch)
    if in_quote:
        raise ModelSyntaxError(f"unbalanced quote in line: {line.strip()!r}")
    return "".join(out)


def _split_top(text: str, sep: str) -> list[str]:
    """Split on sep outside quotes; '+' inside a numeric exponent is kept."""
    parts: list[str] = []
    buf: list[str] = []
    in_quote = False
    for i, ch in enumerate(text):
        if ch == '"':
            in_quote = not in_quote
            buf.append(ch)
            continue
        if ch == sep and not in_quote:
            if sep == "+" and i >= 2 and text[i - 1] in "eE" and (
                text[i - 2].isdigit() or text[i - 2] == "."
            ):
                buf.append(ch)
                continue
            parts.append("".join(buf))
            buf = []
            continue
        buf.append(ch)
    parts.append("".join(buf))
    return parts


def _parse_term(term: str, stmt: str) -> tuple[str, Modifier]:
    term = term.strip()
    if not term:
        raise ModelSyntaxError(f"dangling '+' in statement: {stmt!r}")
    pieces = [p.strip() for p in _split_top(term, "*")]
    if len(pieces) > 2:
        raise ModelSyntaxError(
            f"at most one modifier is allowed per term, got {term!r} in {stmt!r}"
        )
    if len(pieces) == 2:
        mod_text, target = pieces
        if not mod_text:
            raise ModelSyntaxError(f"empty modifier in term {term!r}")
        if mod_text == "NA":
            mod = Modifier("free")
        elif _NUM_RE.match(mod_text):
            mod = Modifier("fixed", value=float(mod_text))
        else:
            m = _EQUAL_RE.match(mod_text)
            if m:
                mod = Modifier("equal", label=m.group(1).strip())
            else:
                raise ModelSyntaxError(f"malformed modifier {mod_text!r} in {stmt!r}")
    else:
        target, mod = pieces[0], Modifier()
    if not target:
        raise ModelSyntaxError(f"missing variable name in term {term!r}")
    if target != "1" and not _NAME_RE.match(target):
        raise ModelSyntaxError(f"invalid name {target!r} in statement {stmt!r}")
    return target, mod


def _find_outside_quotes(text: str, needle: str) -> int:
    in_quote = False
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == '"':
            in_quote = not in_quote
        elif not in_quote and text.startswith(needle, i):
            return i
        i += 1
    return -1


def _parse_statement(stmt: str) -> ModelLine | None:
    text = stmt.strip()
    if not text:
        return None
    for op in ("=~", "~~", "~"):
        # operators are matched longest-first so '~~' is not read as '~ ~',
        # and quoted equality labels are skipped
        idx = _find_outside_quotes(text, op)
        if idx > 0:
            lhs = text[:idx].strip()
            rhs_text = text[idx + len(op):].strip()
            break
    else:
        raise ModelSyntaxError(f"no operator found in statement: {stmt!r}")
    if not _NAME_RE.match(lhs):
        raise ModelSyntaxError(f"invalid left-hand side {lhs!r} in {stmt!r}")
    if not rhs_text:
        raise ModelSyntaxError(f"empty right-hand side in statement: {stmt!r}")
    terms = tuple(_parse_term(t, stmt) for t in _split_top(rhs_text, "+"))
    constants = [t for t, _ in terms if t == "1"]
    if constants:
        if op != "~":
            raise ModelSyntaxError(f"the constant 1 is only valid with '~': {stmt!r}")
        if len(terms) != 1:
            raise ModelSyntaxError(
                f"intercepts must be declared on their own line: {stmt!r}"
            )
        return ModelLine(lhs, "~1", terms)
    return ModelLine(lhs, op, terms)


def parse_model(text: str) -> list[ModelLine]:
    """Parse model text into a list of ModelLine records.

    Statements are separated by newlines or semicolons; '#' starts a
    comment.  Raises ModelSyntaxError for malformed statements.
    """
    lines: list[ModelLine] = []
    for raw in text.replace(";", "\n").split("\n"):
        stripped = _strip_comment(raw)
        parsed = _parse_statement(stripped)
        if parsed is not None:
            lines.append(parsed)
    if not lines:
        raise ModelSyntaxError("model text contains no statements")
    return lines


def infer_observed(lines: list[ModelLine]) -> list[str]:
    """Names referenced by the model that are not declared latent.

    Order follows first appearance in the model text, which is the
    column-order authority for data files.
    """
    latents = {ln.lhs for ln in lines if ln.op == "=~"}
    seen: list[str] = []

    def visit(name: str):
        if name != "1" and name not in latents and name not in seen:
            seen.append(name)

    for ln in lines:
        if ln.op != "=~":
            visit(ln.lhs)
        for target, _ in ln.rhs:
            visit(target)
    return seen


def _mk_label(matrix: str, lhs: str, rhs: str) -> str:
    if matrix == "lambda":
        return f"{lhs} =~ {rhs}"
    if matrix == "beta":
        return f"{lhs} ~ {rhs}"
    if matrix in ("theta", "psi"):
        return f"{lhs} ~~ {rhs}"
    return f"{lhs} ~ 1"


class _TableBuilder:
    def __init__(self, lines: list[ModelLine], observed: list[str]):
        self.lines = lines
        self.latents: list[str] = []
        for ln in lines:
            if ln.op == "=~" and ln.lhs not in self.latents:
                self.latents.append(ln.lhs)
        self.upgraded: list[str] = []
        referenced = set(infer_observed(lines)) | set(self.latents)
        self.observed = [v for v in observed if v in referenced]
        missing = [v for v in infer_observed(lines) if v not in observed]
        if missing:
            raise ModelSyntaxError(
                f"variables referenced by the model but not observed or latent: {missing}"
            )
        clash = set(self.latents) & set(self.observed)
        if clash:
            raise ModelSyntaxError(
                f"names declared both latent and observed: {sorted(clash)}"
            )
        self.rows: list[ParamRow] = []
        self.slots: dict[tuple[str, str, str], ParamRow] = {}
        self.label_map: dict[str, ParamRow] = {}

    def is_latent(self, name: str) -> bool:
        return name in self.latents or name in self.upgraded

    def add(self, row: ParamRow, stmt: str = "") -> ParamRow:
        key = (row.matrix, row.row, row.col)
        alt = (row.matrix, row.col, row.row)
        if key in self.slots or (row.matrix in ("theta", "psi") and alt in self.slots):
            raise ModelSyntaxError(
                f"parameter {row.label!r} declared twice"
                + (f" (statement {stmt!r})" if stmt else "")
            )
        self.rows.append(row)
        self.slots[key] = row
        self.label_map.setdefault(row.label, row)
        if row.matrix == "beta":
            # a latent-indicator line 'f =~ g' is the path 'g ~ f'
            self.label_map.setdefault(f"{row.row} ~ {row.col}", row)
            self.label_map.setdefault(f"{row.col} =~ {row.row}", row)
        elif row.matrix in ("theta", "psi"):
            self.label_map.setdefault(f"{row.col} ~~ {row.row}", row)
        return row

    def upgrade_pass(self):
        """Observed variables used in regressions become single-indicator latents."""
        for ln in self.lines:
            if ln.op != "~":
                continue
            names = [ln.lhs] + [t for t, _ in ln.rhs]
            for name in names:
                if name in self.observed and name not in self.upgraded:
                    self.upgraded.append(name)

    def route_lines(self):
        for ln in self.lines:
            stmt = f"{ln.lhs} {ln.op}"
            if ln.op == "=~":
                self._route_measurement(ln)
            elif ln.op == "~":
                self._route_regression(ln)
            elif ln.op == "~1":
                self._route_intercept(ln)
            elif ln.op == "~~":
                self._route_covariance(ln)
            else:  # pragma: no cover - parse_model never produces other ops
                raise ModelSyntaxError(f"unknown operator in {stmt!r}")

    def _mod_to_fields(self, mod: Modifier) -> tuple[bool, float, str | None]:
        if mod.kind == "fixed":
            return False, mod.value, None
        if mod.kind == "equal":
            return True, float("nan"), mod.label
        return True, float("nan"), None

    def _route_measurement(self, ln: ModelLine):
        first_term = not any(
            r.matrix in ("lambda", "beta") and r.col == ln.lhs for r in self.rows
        )
        for target, mod in ln.rhs:
            free, value, equal_to = self._mod_to_fields(mod)
            auto_fixed = False
            if first_term and mod.kind == "none":
                free, value, auto_fixed = False, 1.0, True
            first_term = False
            if self.is_latent(target):
                row = ParamRow(
                    "beta", target, ln.lhs, free, value,
                    _mk_label("beta", target, ln.lhs),
                    equal_to=equal_to, auto_fixed=auto_fixed,
                )
            else:
                if target not in self.observed:
                    raise ModelSyntaxError(
                        f"unknown variable {target!r} in measurement of {ln.lhs!r}"
                    )
                row = ParamRow(
                    "lambda", target, ln.lhs, free, value,
                    _mk_label("lambda", ln.lhs, target),
                    equal_to=equal_to, auto_fixed=auto_fixed,
                )
            self.add(row, f"{ln.lhs} =~ {target}")

    def _route_regression(self, ln: ModelLine):
        lhs = ln.lhs
        if not self.is_latent(lhs):
            raise ModelSyntaxError(f"unknown variable {lhs!r} in regression")
        for target, mod in ln.rhs:
            if target == lhs:
                raise ModelSyntaxError(f"self-regression {lhs!r} ~ {target!r}")
            if not self.is_latent(target):
                raise ModelSyntaxError(f"unknown variable {target!r} in regression")
            free, value, equal_to = self._mod_to_fields(mod)
            self.add(
                ParamRow("beta", lhs, target, free, value,
                         _mk_label("beta", lhs, target), equal_to=equal_to),
                f"{lhs} ~ {target}",
            )

    def _route_intercept(self, ln: ModelLine):
        v = ln.lhs
        _, mod = ln.rhs[0]
        free, value, equal_to = self._mod_to_fields(mod)
        if v in self.observed:
            self.add(ParamRow("nu", v, v, free, value, _mk_label("nu", v, v),
                              equal_to=equal_to), f"{v} ~ 1")
        elif v in self.latents:
            self.add(ParamRow("alpha", v, v, free, value, _mk_label("alpha", v, v),
                              equal_to=equal_to), f"{v} ~ 1")
        else:
            raise ModelSyntaxError(f"unknown variable {v!r} in intercept statement")

    def _route_covariance(self, ln: ModelLine):
        a = ln.lhs
        for b, mod in ln.rhs:
            free, value, equal_to = self._mod_to_fields(mod)
            a_lat, b_lat = self.is_latent(a), self.is_latent(b)
            if a_lat != b_lat:
                raise ModelSyntaxError(
                    f"covariance between a latent and an observed variable is not "
                    f"supported: {a!r} ~~ {b!r}"
                )
            matrix = "psi" if a_lat else "theta"
            if not a_lat and (a not in self.observed or b not in self.observed):
                bad = a if a not in self.observed else b
                raise ModelSyntaxError(f"unknown variable {bad!r} in covariance")
            self.add(ParamRow(matrix, a, b, free, value,
                              _mk_label(matrix, a, b), equal_to=equal_to),
                     f"{a} ~~ {b}")

    def add_upgrade_rows(self):
        # upgraded variables keep their name in the latent namespace; the
        # observed column becomes a perfect indicator with zero residual
        for v in self.upgraded:
            self.add(ParamRow("lambda", v, v, False, 1.0,
                              _mk_label("lambda", v, v), auto_added=True))
            self.add(ParamRow("theta", v, v, False, 0.0,
                              _mk_label("theta", v, v), auto_added=True))

    def add_defaults(self):
        for v in self.observed:
            if ("theta", v, v) not in self.slots:
                self.add(ParamRow("theta", v, v, True, float("nan"),
                                  _mk_label("theta", v, v), auto_added=True))
        for f in self.latents + self.upgraded:
            if ("psi", f, f) not in self.slots:
                self.add(ParamRow("psi", f, f, True, float("nan"),
                                  _mk_label("psi", f, f), auto_added=True))
        # exogenous latents (no incoming path, declared or upgraded) covary
        # freely with each other by default
        receiving = {r.row for r in self.rows if r.matrix == "beta"}
        exo = [f for f in self.latents + self.upgraded if f not in receiving]
        for i, fi in enumerate(exo):
            for fj in exo[i + 1:]:
                if ("psi", fi, fj) in self.slots or ("psi", fj, fi) in self.slots:
                    continue
                self.add(ParamRow("psi", fi, fj, True, float("nan"),
                                  _mk_label("psi", fi, fj), auto_added=True))
        for v in self.observed:
            if ("nu", v, v) not in self.slots:
                self.add(ParamRow("nu", v, v, True, float("nan"),
                                  _mk_label("nu", v, v), auto_added=True))
        # latent intercepts default to fixed zero and get no row unless declared

    def resolve_equalities(self):
        for row in self.rows:
            if row.equal_to is None:
                continue
            chain = [row.label]
            target_label = row.equal_to
            target = self.label_map.get(target_label)
            while target is not None and target.equal_to is not None:
                if target.label in chain:
                    raise ModelSyntaxError(
                        f"circular equality constraint through {target.label!r}"
                    )
                chain.append(target.label)
                target_label = target.equal_to
                target = self.label_map.get(target_label)
            if target is None:
                raise ModelSyntaxError(
                    f"equality label references a parameter that does not exist: "
                    f"{row.equal_to!r}"
                )
            if not target.free:
                raise ModelSyntaxError(
                    f"equality label {row.equal_to!r} references a fixed parameter"
                )
            if target.klass != row.klass:
                raise ModelSyntaxError(
                    f"equality constraint crosses parameter classes: "
                    f"{row.label!r} ({row.klass}) vs {target.label!r} ({target.klass})"
                )
            if target is row:
                raise ModelSyntaxError(
                    f"parameter {row.label!r} constrained equal to itself"
                )
            row.equal_to = target.label

    def validate_fixed_values(self):
        for row in self.rows:
            if row.free:
                continue
            if row.matrix in ("theta", "psi"):
                if row.row == row.col and row.value < 0:
                    raise ModelSyntaxError(
                        f"fixed variance for {row.label!r} must be nonnegative"
                    )
                if row.row != row.col and abs(row.value) > 1:
                    raise ModelSyntaxError(
                        f"fixed covariances are interpreted as correlations and must "
                        f"lie in [-1, 1]: {row.label!r}"
                    )

    def build(self) -> ParameterTable:
        self.upgrade_pass()
        self.route_lines()
        self.add_upgrade_rows()
        self.add_defaults()
        self.resolve_equalities()
        self.validate_fixed_values()
        latents = self.latents + [v for v in self.upgraded if v not in self.latents]
        return ParameterTable(self.rows, self.observed, latents, list(self.upgraded))


def build_parameter_table(lines: list[ModelLine], observed: list[str]) -> ParameterTable:
    """Expand parsed lines into a parameter table.

    ``observed`` gives the observed-variable order (normally the data
    columns); names referenced by the model must appear in it unless they
    are latent.
    """
    return _TableBuilder(lines, observed).build()


def _render_modifier(row: ParamRow) -> str:
    if row.equal_to is not None:
        return f'equal("{row.equal_to}")*'
    if not row.free:
        return f"{row.value:g}*"
    return ""


def render_parameter_table(table: ParameterTable) -> str:
    """Canonical model text that re-parses to an equivalent table.

    Default-added rows are omitted; re-parsing regenerates them.  A
    latent whose only indicator is another latent has no loading rows,
    so one of its outgoing path rows is rendered in ``=~`` form to keep
    the latent declared.
    """
    declared = {f for f in table.latents if f not in table.upgraded}
    lambda_cols = {
        r.col for r in table.rows if r.matrix == "lambda" and not r.auto_added
    }
    undeclared = declared - lambda_cols
    out: list[str] = []
    for row in table.rows:
        if row.auto_added:
            continue
        mod = _render_modifier(row)
        if row.matrix == "lambda":
            mod = mod or "NA*"
            out.append(f"{row.col} =~ {mod}{row.row}")
        elif row.matrix == "beta":
            if row.col in undeclared and row.row in declared:
                undeclared.discard(row.col)
                mod = mod or "NA*"
                out.append(f"{row.col} =~ {mod}{row.row}")
            else:
                out.append(f"{row.row} ~ {mod}{row.col}")
        elif row.matrix in ("theta", "psi"):
            out.append(f"{row.row} ~~ {mod}{row.col}")
        elif row.matrix == "nu":
            out.append(f"{row.row} ~ {mod}1")
        elif row.matrix == "alpha":
            out.append(f"{row.row} ~ {mod}1")
    return "\n".join(out)
