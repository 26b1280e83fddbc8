"""Shared domain types: datasets, generalized propensity scores, estimates.

Treatment labels are integers ``1..Z`` and outcomes are binary ``{0, 1}``.
Covariates are stored compactly as a single float matrix with a per-column
kind tag (``"continuous"`` or ``"categorical"``); categorical columns hold
contiguous integer level codes and are expanded to reference-coded
indicator columns only inside estimators, via :func:`design_matrix`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

# Fitted assignment probabilities are clamped away from {0, 1} because
# weighting divides by them and rare-outcome fits can return ~0.
GPS_CLAMP = 1e-6

RD = "RD"
RR = "RR"


class SchemaError(ValueError):
    """A column-role map does not match the file it describes."""


class DataValidationError(ValueError):
    """File contents violate the dataset contract."""


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ColumnSchema:
    """Column-role map for a dataset file.

    Parameters
    ----------
    treatment : str
        Name of the integer treatment column (labels ``1..Z``).
    outcome : str
        Name of the binary outcome column.
    covariates : tuple of (name, kind)
        Covariate columns in order; kind is ``"continuous"`` or
        ``"categorical"``.
    """

    treatment: str
    outcome: str
    covariates: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not self.covariates:
            raise SchemaError("schema needs at least one covariate column")
        for name, kind in self.covariates:
            if kind not in (CONTINUOUS, CATEGORICAL):
                raise SchemaError(f"unknown covariate kind {kind!r} for {name!r}")
        names = [self.treatment, self.outcome] + [n for n, _ in self.covariates]
        if len(set(names)) != len(names):
            raise SchemaError("schema column names must be distinct")


@dataclass(frozen=True)
class Dataset:
    """Immutable covariate/treatment/outcome container.

    Attributes
    ----------
    X : ndarray, shape (N, P)
        Covariate matrix; categorical columns hold integer level codes.
    kinds : tuple of str
        Per-column kind tag, same order as the columns of ``X``.
    W : ndarray, shape (N,)
        Treatment labels in ``1..Z``; every label occurs at least once.
    Y : ndarray, shape (N,)
        Binary outcomes.
    truth : ndarray, shape (N, Z), optional
        True potential-outcome probabilities for simulated data.
    names : tuple of str
        Covariate column names.
    """

    X: np.ndarray
    kinds: tuple[str, ...]
    W: np.ndarray
    Y: np.ndarray
    truth: np.ndarray | None = None
    names: tuple[str, ...] = ()

    def __post_init__(self):
        X = _frozen_array(self.X, dtype=float)
        W = _frozen_array(self.W, dtype=np.int64)
        Y = _frozen_array(self.Y, dtype=np.int64)
        if X.ndim != 2:
            raise DataValidationError("X must be a 2-d matrix")
        n, p = X.shape
        if not np.all(np.isfinite(X)):
            raise DataValidationError("covariates contain missing or non-finite values")
        if len(self.kinds) != p:
            raise DataValidationError("one kind tag required per covariate column")
        for kind in self.kinds:
            if kind not in (CONTINUOUS, CATEGORICAL):
                raise DataValidationError(f"unknown covariate kind {kind!r}")
        if W.shape != (n,) or Y.shape != (n,):
            raise DataValidationError("W and Y must have one entry per row of X")
        if n == 0:
            raise DataValidationError("dataset is empty")
        if W.min() < 1:
            raise DataValidationError("treatment labels must be in 1..Z")
        z = int(W.max())
        present = np.unique(W)
        if present.size != z:
            missing = sorted(set(range(1, z + 1)) - set(present.tolist()))
            raise DataValidationError(f"treatment labels absent from data: {missing}")
        if n < z:
            raise DataValidationError("need at least Z units")
        if not np.isin(Y, (0, 1)).all():
            bad = Y[~np.isin(Y, (0, 1))][0]
            raise DataValidationError(f"outcome values must be 0/1, got {bad}")
        names = tuple(self.names) if self.names else tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise DataValidationError("one name required per covariate column")
        truth = self.truth
        if truth is not None:
            truth = _frozen_array(truth, dtype=float)
            if truth.shape != (n, z):
                raise DataValidationError("truth must be an N x Z matrix")
            if truth.min() < 0.0 or truth.max() > 1.0:
                raise DataValidationError("truth entries must lie in [0, 1]")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def n_treatments(self) -> int:
        return int(self.W.max())


def group_sizes(d: Dataset) -> np.ndarray:
    """Number of units observed under each treatment ``1..Z``."""
    return np.bincount(d.W, minlength=d.n_treatments + 1)[1:]


def categorical_levels(d: Dataset, column: int) -> np.ndarray:
    """Sorted observed level codes of a categorical column."""
    if d.kinds[column] != CATEGORICAL:
        raise ValueError(f"column {column} is not categorical")
    return np.unique(d.X[:, column])


def design_matrix(d: Dataset, intercept: bool = False):
    """Numeric design matrix with categoricals reference-coded.

    Continuous columns pass through; each categorical column becomes one
    indicator per observed level except the smallest (reference) level.

    Returns
    -------
    (ndarray, list of str)
        Design matrix and per-column labels.
    """
    cols = []
    labels = []
    if intercept:
        cols.append(np.ones(d.n))
        labels.append("intercept")
    for j, kind in enumerate(d.kinds):
        x = d.X[:, j]
        if kind == CONTINUOUS:
            cols.append(x)
            labels.append(d.names[j])
        else:
            levels = np.unique(x)
            for level in levels[1:]:
                cols.append((x == level).astype(float))
                labels.append(f"{d.names[j]}={level:g}")
    return np.column_stack(cols), labels


@dataclass(frozen=True)
class GpsMatrix:
    """Per-unit treatment-assignment probabilities over Z treatments.

    Rows sum to one (within 1e-8) and every entry is strictly inside
    ``(0, 1)``.  Build from raw fitted probabilities with
    :meth:`from_raw`, which clamps each entry to
    ``[GPS_CLAMP, 1 - GPS_CLAMP]`` and renormalizes rows.
    """

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen_array(self.probs, dtype=float)
        if probs.ndim != 2 or probs.shape[1] < 2:
            raise DataValidationError("GPS matrix must be N x Z with Z >= 2")
        if not np.all(np.isfinite(probs)):
            raise DataValidationError("GPS entries must be finite")
        if probs.min() <= 0.0 or probs.max() >= 1.0:
            raise DataValidationError("GPS entries must be strictly inside (0, 1)")
        if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-8:
            raise DataValidationError("GPS rows must sum to 1 within 1e-8")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "GpsMatrix":
        clipped = np.clip(np.asarray(raw, dtype=float), GPS_CLAMP, 1.0 - GPS_CLAMP)
        return cls(clipped / clipped.sum(axis=1, keepdims=True))

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def n_treatments(self) -> int:
        return self.probs.shape[1]

    def observed(self, w: np.ndarray) -> np.ndarray:
        """Probability of the treatment each unit actually received."""
        return self.probs[np.arange(self.n), np.asarray(w, dtype=int) - 1]


@dataclass(frozen=True)
class CausalEstimate:
    """Pairwise average-treatment-effect estimate.

    ``point`` is a risk difference in probability units when
    ``estimand == "RD"`` and a dimensionless risk ratio when
    ``estimand == "RR"``.  ``interval`` is a 95% interval or ``None``
    when no interval machinery was run.
    """

    pair: tuple[int, int]
    estimand: str
    point: float
    method: str
    n_used: int
    interval: tuple[float, float] | None = None

    def __post_init__(self):
        k, l = self.pair
        if k == l:
            raise ValueError("pair must compare two distinct treatments")
        if self.estimand not in (RD, RR):
            raise ValueError(f"estimand must be RD or RR, got {self.estimand!r}")
        if self.estimand == RR and self.point <= 0:
            raise ValueError("RR point estimate must be positive")
        if self.interval is not None:
            lower, upper = self.interval
            if not (lower <= self.point <= upper):
                raise ValueError(
                    f"interval ({lower}, {upper}) does not bracket point {self.point}"
                )


def nearest_rank(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile of a sample.

    Returns the smallest sorted value whose rank is at least ``ceil(p * n)``.
    Deterministic across platforms; used for weight/GPS trimming and
    empirical interval endpoints.
    """
    values = np.sort(np.asarray(values, dtype=float).ravel())
    n = values.size
    if n == 0:
        raise ValueError("empty sample has no percentiles")
    if p <= 0.0:
        return float(values[0])
    if p >= 1.0:
        return float(values[-1])
    rank = int(np.ceil(p * n))
    return float(values[max(rank, 1) - 1])


def _fmt(value: float) -> str:
    # repr of a float is the shortest round-trip form, which keeps file
    # output byte-identical across runs.
    return repr(float(value))


def save_dataset(d: Dataset, path, truth_path=None) -> None:
    """Write a dataset as CSV (plus optional truth sidecar).

    Covariate columns come first in schema order, then the treatment and
    outcome columns (named ``w`` and ``y``).  The truth sidecar holds one
    column per treatment, ``truth_1..truth_Z``.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(d.names) + ["w", "y"])
        for i in range(d.n):
            row = []
            for j, kind in enumerate(d.kinds):
                if kind == CATEGORICAL:
                    row.append(str(int(d.X[i, j])))
                else:
                    row.append(_fmt(d.X[i, j]))
            row.append(str(int(d.W[i])))
            row.append(str(int(d.Y[i])))
            writer.writerow(row)
    if truth_path is not None:
        if d.truth is None:
            raise ValueError("dataset has no truth matrix to save")
        z = d.truth.shape[1]
        with Path(truth_path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"truth_{w}" for w in range(1, z + 1)])
            for i in range(d.n):
                writer.writerow([_fmt(v) for v in d.truth[i]])


def schema_for(d: Dataset) -> ColumnSchema:
    """Schema describing a dataset as :func:`save_dataset` writes it."""
    return ColumnSchema(
        treatment="w",
        outcome="y",
        covariates=tuple(zip(d.names, d.kinds)),
    )


def load_dataset(path, schema: ColumnSchema, truth_path=None) -> Dataset:
    """Read and validate a dataset CSV against a column-role map.

    Categorical covariate columns are re-coded to contiguous integer
    levels ``1..L`` (sorted by original value); row order is preserved.

    Raises
    ------
    SchemaError
        If a named column is missing from the file.
    DataValidationError
        If contents violate the dataset contract (non-binary outcome,
        missing treatment label, non-numeric cell, ...).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path} is empty") from None
        rows = [row for row in reader if row]
    index = {name: i for i, name in enumerate(header)}
    for required in [schema.treatment, schema.outcome] + [n for n, _ in schema.covariates]:
        if required not in index:
            raise SchemaError(f"column {required!r} missing from {path}")

    def column(name, caster):
        out = []
        for r, row in enumerate(rows):
            cell = row[index[name]]
            try:
                out.append(caster(cell))
            except ValueError:
                raise DataValidationError(
                    f"non-numeric value {cell!r} in column {name!r}, row {r + 2}"
                ) from None
        return out

    w = np.array(column(schema.treatment, int))
    y = np.array(column(schema.outcome, int))
    cols = []
    for name, kind in schema.covariates:
        values = np.array(column(name, float))
        if kind == CATEGORICAL:
            # contiguous recode, sorted by original level value
            _, codes = np.unique(values, return_inverse=True)
            values = codes.astype(float) + 1.0
        cols.append(values)
    X = np.column_stack(cols)
    truth = None
    if truth_path is not None:
        with Path(truth_path).open(newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            truth = np.array([[float(c) for c in row] for row in reader if row])
    return Dataset(
        X=X,
        kinds=tuple(k for _, k in schema.covariates),
        W=w,
        Y=y,
        truth=truth,
        names=tuple(n for n, _ in schema.covariates),
    )
