"""Matrix templates for the all-y latent variable model.

The observed vector y (length p) and latent vector eta (length m) follow

    y   = nu + Lambda eta + eps,    eps ~ N(0, Theta)
    eta = alpha + B eta + zeta,     zeta ~ N(0, Psi)

Theta and Psi are stored in separated form, D R D, with a standard
deviation vector D and a correlation matrix R.  A template maps every
matrix slot either to a free-parameter index or to a fixed value, with
equality constraints sharing one index across slots.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .syntax import CLASS_ORDER, ParameterTable

__all__ = [
    "ModelBuildError",
    "MatrixTemplates",
    "StructureFlags",
    "SemMatrices",
    "build_templates",
    "analyze_structure",
    "assemble",
    "extract_free",
    "gather_free",
]


class ModelBuildError(ValueError):
    """Inconsistent parameter table or invalid free-parameter vector."""


@dataclass
class MatrixTemplates:
    """Slot-to-parameter maps for every model matrix.

    ``*_idx`` arrays hold the free-parameter index of each slot, or -1
    for fixed slots; ``*_fix`` arrays hold the fixed values.  Standard
    deviation templates store fixed values on the sd scale even though
    the syntax declares variances.  Correlation templates only carry
    indices in the upper triangle (row < col).
    """

    observed: list[str]
    latents: list[str]
    p: int
    m: int
    nu_idx: np.ndarray
    nu_fix: np.ndarray
    alpha_idx: np.ndarray
    alpha_fix: np.ndarray
    lambda_idx: np.ndarray
    lambda_fix: np.ndarray
    b_idx: np.ndarray
    b_fix: np.ndarray
    resid_sd_idx: np.ndarray
    resid_sd_fix: np.ndarray
    resid_cor_idx: np.ndarray
    resid_cor_fix: np.ndarray
    latent_sd_idx: np.ndarray
    latent_sd_fix: np.ndarray
    latent_cor_idx: np.ndarray
    latent_cor_fix: np.ndarray
    n_free: int
    param_names: list[str]
    param_classes: list[str]
    # row label -> free index; equality-constrained labels share an index
    row_to_index: dict[str, int] = field(default_factory=dict)

    def rep_slot(self, k: int) -> tuple[str, int, int]:
        """First (matrix, row, col) slot carrying free parameter k."""
        for name, idx in self._index_arrays():
            if idx.ndim == 1:
                hits = np.nonzero(idx == k)[0]
                if hits.size:
                    return name, int(hits[0]), int(hits[0])
            else:
                hits = np.argwhere(idx == k)
                if hits.size:
                    return name, int(hits[0][0]), int(hits[0][1])
        raise KeyError(k)

    def _index_arrays(self):
        return [
            ("lambda", self.lambda_idx),
            ("beta", self.b_idx),
            ("resid_sd", self.resid_sd_idx),
            ("resid_cor", self.resid_cor_idx),
            ("latent_sd", self.latent_sd_idx),
            ("latent_cor", self.latent_cor_idx),
            ("nu", self.nu_idx),
            ("alpha", self.alpha_idx),
        ]

    def slot_count(self, k: int) -> int:
        return sum(int(np.sum(idx == k)) for _, idx in self._index_arrays())


@dataclass(frozen=True)
class StructureFlags:
    """Which structure-exploiting shortcuts apply to a template.

    ``b_recursive`` means the path matrix has no cycles, so I - B is
    invertible with unit determinant and its inverse is the finite
    Neumann series.  ``order`` is a witness permutation of the latents
    that makes B strictly lower triangular.
    """

    b_recursive: bool
    psi_diagonal: bool
    theta_diagonal: bool
    order: tuple[int, ...] | None = None

    @property
    def fully_simplified(self) -> bool:
        return self.b_recursive and self.psi_diagonal and self.theta_diagonal


@dataclass
class SemMatrices:
    """Numeric model matrices for one free-parameter vector."""

    intercepts: np.ndarray      # (p,)
    latent_means: np.ndarray    # (m,)
    loadings: np.ndarray        # (p, m)
    paths: np.ndarray           # (m, m)
    resid_sd: np.ndarray        # (p,)
    resid_cor: np.ndarray       # (p, p)
    latent_sd: np.ndarray       # (m,)
    latent_cor: np.ndarray      # (m, m)

    @property
    def resid_cov(self) -> np.ndarray:
        d = self.resid_sd
        return d[:, None] * self.resid_cor * d[None, :]

    @property
    def latent_cov(self) -> np.ndarray:
        d = self.latent_sd
        return d[:, None] * self.latent_cor * d[None, :]


def build_templates(table: ParameterTable) -> MatrixTemplates:
    """Assign free-parameter indices and build the slot maps.

    Indices are assigned a class at a time in the order loadings, paths,
    residual sds, residual correlations, latent sds, latent correlations,
    intercepts, latent means; within a class they follow first appearance
    in the table, with equality groups sharing the index of their first
    member.
    """
    obs_pos = {v: i for i, v in enumerate(table.observed)}
    lat_pos = {f: i for i, f in enumerate(table.latents)}
    p, m = len(table.observed), len(table.latents)

    nu_idx = np.full(p, -1, dtype=np.intp)
    nu_fix = np.zeros(p)
    alpha_idx = np.full(m, -1, dtype=np.intp)
    alpha_fix = np.zeros(m)
    lambda_idx = np.full((p, m), -1, dtype=np.intp)
    lambda_fix = np.zeros((p, m))
    b_idx = np.full((m, m), -1, dtype=np.intp)
    b_fix = np.zeros((m, m))
    resid_sd_idx = np.full(p, -1, dtype=np.intp)
    resid_sd_fix = np.ones(p)
    resid_cor_idx = np.full((p, p), -1, dtype=np.intp)
    resid_cor_fix = np.eye(p)
    latent_sd_idx = np.full(m, -1, dtype=np.intp)
    latent_sd_fix = np.ones(m)
    latent_cor_idx = np.full((m, m), -1, dtype=np.intp)
    latent_cor_fix = np.eye(m)

    label_to_index: dict[str, int] = {}
    param_names: list[str] = []
    param_classes: list[str] = []
    row_to_index: dict[str, int] = {}
    counter = itertools.count()

    def claim(row, rep_label: str) -> int:
        if rep_label in label_to_index:
            return label_to_index[rep_label]
        k = next(counter)
        label_to_index[rep_label] = k
        param_names.append(rep_label)
        param_classes.append(row.klass)
        return k

    for klass in CLASS_ORDER:
        for row in table.rows:
            if row.klass != klass:
                continue
            r = obs_pos[row.row] if row.matrix in ("nu", "lambda", "theta") else lat_pos[row.row]
            if row.matrix in ("lambda", "beta"):
                c = lat_pos[row.col]
            elif row.matrix == "theta":
                c = obs_pos[row.col]
            elif row.matrix == "psi":
                c = lat_pos[row.col]
            else:
                c = r
            k = -1
            if row.free:
                k = claim(row, row.equal_to or row.label)
                row_to_index[row.label] = k
            if row.matrix == "nu":
                _set_slot(nu_idx, nu_fix, (r,), k, row, row.value)
            elif row.matrix == "alpha":
                _set_slot(alpha_idx, alpha_fix, (r,), k, row, row.value)
            elif row.matrix == "lambda":
                _set_slot(lambda_idx, lambda_fix, (r, c), k, row, row.value)
            elif row.matrix == "beta":
                if r == c:
                    raise ModelBuildError(f"path from a latent to itself: {row.label!r}")
                _set_slot(b_idx, b_fix, (r, c), k, row, row.value)
            elif row.matrix == "theta":
                if r == c:
                    _set_slot(resid_sd_idx, resid_sd_fix, (r,), k, row,
                              float(np.sqrt(row.value)) if not row.free else row.value)
                else:
                    i, j = min(r, c), max(r, c)
                    _set_cor_slot(resid_cor_idx, resid_cor_fix, i, j, k, row)
            elif row.matrix == "psi":
                if r == c:
                    _set_slot(latent_sd_idx, latent_sd_fix, (r,), k, row,
                              float(np.sqrt(row.value)) if not row.free else row.value)
                else:
                    i, j = min(r, c), max(r, c)
                    _set_cor_slot(latent_cor_idx, latent_cor_fix, i, j, k, row)

    return MatrixTemplates(
        observed=list(table.observed), latents=list(table.latents), p=p, m=m,
        nu_idx=nu_idx, nu_fix=nu_fix, alpha_idx=alpha_idx, alpha_fix=alpha_fix,
        lambda_idx=lambda_idx, lambda_fix=lambda_fix, b_idx=b_idx, b_fix=b_fix,
        resid_sd_idx=resid_sd_idx, resid_sd_fix=resid_sd_fix,
        resid_cor_idx=resid_cor_idx, resid_cor_fix=resid_cor_fix,
        latent_sd_idx=latent_sd_idx, latent_sd_fix=latent_sd_fix,
        latent_cor_idx=latent_cor_idx, latent_cor_fix=latent_cor_fix,
        n_free=len(param_names), param_names=param_names,
        param_classes=param_classes, row_to_index=row_to_index,
    )


def _set_slot(idx, fix, pos, k, row, fixed_value):
    if k >= 0:
        idx[pos] = k
    else:
        fix[pos] = fixed_value


def _set_cor_slot(idx, fix, i, j, k, row):
    if k >= 0:
        idx[i, j] = k
    else:
        fix[i, j] = row.value
        fix[j, i] = row.value


def analyze_structure(t: MatrixTemplates) -> StructureFlags:
    """Detect the structural shortcuts a template admits.

    The path matrix counts as recursive when the directed graph of its
    potentially nonzero slots is acyclic (Kahn's algorithm); diagonal
    flags require every off-diagonal correlation slot to be fixed at 0.
    """
    m = t.m
    nonzero = (t.b_idx >= 0) | (t.b_fix != 0.0)
    preds = [set(np.nonzero(nonzero[i])[0].tolist()) for i in range(m)]
    placed: list[int] = []
    remaining = set(range(m))
    while remaining:
        ready = [i for i in sorted(remaining) if preds[i] <= set(placed)]
        if not ready:
            break
        placed.append(ready[0])
        remaining.discard(ready[0])
    recursive = not remaining
    order = tuple(placed) if recursive else None

    def diagonal(idx, fix):
        off = ~np.eye(idx.shape[0], dtype=bool)
        return not ((idx[off] >= 0).any() or (fix[off] != 0.0).any())

    return StructureFlags(
        b_recursive=recursive,
        psi_diagonal=diagonal(t.latent_cor_idx, t.latent_cor_fix),
        theta_diagonal=diagonal(t.resid_cor_idx, t.resid_cor_fix),
        order=order,
    )


def assemble(t: MatrixTemplates, theta: np.ndarray) -> SemMatrices:
    """Scatter a free-parameter vector into numeric model matrices.

    ``theta`` is on the constrained scale: sds nonnegative, correlations
    in [-1, 1].  Raises ModelBuildError on length mismatch or values
    outside those ranges.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (t.n_free,):
        raise ModelBuildError(
            f"expected {t.n_free} free parameters, got shape {theta.shape}"
        )

    def fill(idx, fix):
        out = fix.copy()
        mask = idx >= 0
        out[mask] = theta[idx[mask]]
        return out

    resid_sd = fill(t.resid_sd_idx, t.resid_sd_fix)
    latent_sd = fill(t.latent_sd_idx, t.latent_sd_fix)
    if (resid_sd < 0).any() or (latent_sd < 0).any():
        raise ModelBuildError("standard deviations must be nonnegative")

    def fill_cor(idx, fix):
        out = fix.copy()
        ii, jj = np.nonzero(idx >= 0)
        vals = theta[idx[ii, jj]]
        out[ii, jj] = vals
        out[jj, ii] = vals
        return out

    resid_cor = fill_cor(t.resid_cor_idx, t.resid_cor_fix)
    latent_cor = fill_cor(t.latent_cor_idx, t.latent_cor_fix)
    if (np.abs(resid_cor) > 1).any() or (np.abs(latent_cor) > 1).any():
        raise ModelBuildError("correlations must lie in [-1, 1]")

    return SemMatrices(
        intercepts=fill(t.nu_idx, t.nu_fix),
        latent_means=fill(t.alpha_idx, t.alpha_fix),
        loadings=fill(t.lambda_idx, t.lambda_fix),
        paths=fill(t.b_idx, t.b_fix),
        resid_sd=resid_sd,
        resid_cor=resid_cor,
        latent_sd=latent_sd,
        latent_cor=latent_cor,
    )


def extract_free(t: MatrixTemplates, sm: SemMatrices) -> np.ndarray:
    """Read the free-parameter vector back out of assembled matrices."""
    theta = np.empty(t.n_free)
    pairs = [
        (t.nu_idx, sm.intercepts),
        (t.alpha_idx, sm.latent_means),
        (t.lambda_idx, sm.loadings),
        (t.b_idx, sm.paths),
        (t.resid_sd_idx, sm.resid_sd),
        (t.resid_cor_idx, sm.resid_cor),
        (t.latent_sd_idx, sm.latent_sd),
        (t.latent_cor_idx, sm.latent_cor),
    ]
    for idx, arr in pairs:
        mask = idx >= 0
        theta[idx[mask]] = arr[mask]
    return theta


def gather_free(t: MatrixTemplates, grads: dict[str, np.ndarray]) -> np.ndarray:
    """Accumulate per-slot gradient arrays into the free-parameter vector.

    ``grads`` maps matrix names (as in SemMatrices plus 'resid_sd',
    'resid_cor', 'latent_sd', 'latent_cor') to arrays of per-slot partial
    derivatives; equality-tied slots sum into their shared index.
    Correlation arrays are read in the upper triangle only.
    """
    g = np.zeros(t.n_free)
    plan = [
        (t.nu_idx, grads.get("intercepts")),
        (t.alpha_idx, grads.get("latent_means")),
        (t.lambda_idx, grads.get("loadings")),
        (t.b_idx, grads.get("paths")),
        (t.resid_sd_idx, grads.get("resid_sd")),
        (t.resid_cor_idx, grads.get("resid_cor")),
        (t.latent_sd_idx, grads.get("latent_sd")),
        (t.latent_cor_idx, grads.get("latent_cor")),
    ]
    for idx, arr in plan:
        if arr is None:
            continue
        mask = idx >= 0
        if mask.any():
            np.add.at(g, idx[mask], arr[mask])
    return g
