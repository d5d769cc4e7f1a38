"""Data loading and missing-data pattern grouping.

Rows are grouped by their missingness pattern so the marginal likelihood
can be evaluated from per-pattern sufficient statistics (count, mean and
centered scatter of the observed block) instead of row by row.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = ["DataError", "Dataset", "PatternGroup", "load_csv", "group_patterns"]

_MISSING_TOKENS = {"", "na", "nan"}


class DataError(ValueError):
    """Unusable data file or matrix."""


@dataclass
class Dataset:
    """Numeric data matrix with NaN marking missing cells.

    Columns follow the model's observed-variable order.  Rows with no
    observed values at all are rejected: they carry no information and
    would produce empty pattern blocks.
    """

    columns: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise DataError("data must be a two-dimensional matrix")
        if self.values.shape[0] == 0:
            raise DataError("data contains no rows")
        if self.values.shape[1] != len(self.columns):
            raise DataError(
                f"{len(self.columns)} columns named but data has "
                f"{self.values.shape[1]}"
            )
        all_missing = np.isnan(self.values).all(axis=1)
        if all_missing.any():
            rows = np.nonzero(all_missing)[0]
            raise DataError(f"rows with every value missing: {rows.tolist()}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def complete(self) -> bool:
        return not np.isnan(self.values).any()


def load_csv(path: str, columns: list[str]) -> Dataset:
    """Read a CSV file and return the named columns in the given order.

    Missing values are the empty string, NA or NaN (case-insensitive).
    Raises DataError for absent columns, non-numeric cells, rows of the
    wrong width, or an empty table.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        missing_cols = [c for c in columns if c not in header]
        if missing_cols:
            raise DataError(f"{path}: missing columns {missing_cols}")
        pos = [header.index(c) for c in columns]
        rows: list[list[float]] = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}"
                )
            out = []
            for j in pos:
                cell = rec[j].strip()
                if cell.lower() in _MISSING_TOKENS:
                    out.append(float("nan"))
                    continue
                try:
                    out.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: non-numeric value {cell!r} in "
                        f"column {header[j]!r}"
                    ) from None
            rows.append(out)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(list(columns), np.asarray(rows, dtype=float))


@dataclass
class PatternGroup:
    """All rows sharing one missingness pattern.

    ``observed_idx`` indexes the observed columns; ``mean`` and
    ``scatter`` are the sample mean and the summed centered cross-product
    of the observed block; ``values`` keeps the raw rows for per-row
    evaluation and for the conditional likelihood.
    """

    observed_idx: np.ndarray
    row_indices: np.ndarray
    values: np.ndarray
    count: int = field(init=False)
    mean: np.ndarray = field(init=False)
    scatter: np.ndarray = field(init=False)
    # cached open-mesh index for scattering into (p, p) matrices
    _grid: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.count = self.values.shape[0]
        self.mean = self.values.mean(axis=0)
        centered = self.values - self.mean
        self.scatter = centered.T @ centered
        self._grid = np.ix_(self.observed_idx, self.observed_idx)

    @property
    def k(self) -> int:
        return self.observed_idx.size


def group_patterns(data: Dataset) -> list[PatternGroup]:
    """Group rows by missingness pattern.

    Groups are ordered by descending count, ties broken by the
    lexicographic order of the observed-flag tuple, so the grouping is
    a pure function of the data.
    """
    masks: dict[tuple[bool, ...], list[int]] = {}
    observed = ~np.isnan(data.values)
    for i in range(data.n):
        masks.setdefault(tuple(observed[i]), []).append(i)
    keyed = sorted(masks.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    groups = []
    for mask, idx in keyed:
        obs_idx = np.nonzero(np.asarray(mask))[0]
        rows = np.asarray(idx, dtype=np.intp)
        groups.append(PatternGroup(
            observed_idx=obs_idx,
            row_indices=rows,
            values=data.values[np.ix_(rows, obs_idx)],
        ))
    return groups
