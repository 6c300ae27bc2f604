"""Dataset container, CSV ingestion and covariate studentization."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Base class for problems with input data."""


class CsvParseError(DataError):
    pass


class MissingColumnError(DataError):
    pass


class NonBinaryTreatmentError(DataError):
    pass


class NonFiniteCovariateError(DataError):
    pass


class EmptyArmError(DataError):
    pass


class MissingOutcomeError(DataError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Covariates ``X`` (n x p), binary treatment ``T`` and optional outcome ``Y``."""

    X: np.ndarray
    T: np.ndarray
    Y: Optional[np.ndarray] = None
    covariate_names: tuple = ()
    outcome_name: str = "y"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DataError("X must be a 2-d array")
        T_raw = np.asarray(self.T)
        if T_raw.shape != (X.shape[0],):
            raise DataError(f"T has shape {T_raw.shape}, expected ({X.shape[0]},)")
        if not np.all(np.isin(T_raw, (0, 1))):
            bad = T_raw[~np.isin(T_raw, (0, 1))][0]
            raise NonBinaryTreatmentError(f"treatment value {bad!r} is not 0 or 1")
        T = T_raw.astype(np.int8)
        if not np.all(np.isfinite(X)):
            raise NonFiniteCovariateError("covariates contain non-finite entries")
        if X.shape[0] < 2:
            raise DataError("need at least two units")
        for arm in (0, 1):
            if not np.any(T == arm):
                raise EmptyArmError(f"treatment arm {arm} has no units")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "T", _frozen(T))
        if self.Y is not None:
            Y = np.asarray(self.Y, dtype=float)
            if Y.shape != (X.shape[0],):
                raise DataError(f"Y has shape {Y.shape}, expected ({X.shape[0]},)")
            object.__setattr__(self, "Y", _frozen(Y))
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def has_outcome(self) -> bool:
        return self.Y is not None

    def outcome(self) -> np.ndarray:
        """Return ``Y`` or raise :class:`MissingOutcomeError` naming the column."""
        if self.Y is None:
            raise MissingOutcomeError(f"outcome column {self.outcome_name!r} is required but absent")
        return self.Y

    def arm(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.T == t)

    def with_covariates(self, X: np.ndarray, names: Sequence[str] = ()) -> "Dataset":
        return Dataset(X, self.T, self.Y, tuple(names), self.outcome_name)

    def take(self, idx: np.ndarray) -> "Dataset":
        Y = None if self.Y is None else self.Y[idx]
        return Dataset(self.X[idx], self.T[idx], Y, self.covariate_names, self.outcome_name)


def load_csv(
    path,
    treatment: str,
    covariates: Sequence[str],
    outcome: Optional[str] = "y",
) -> Dataset:
    """Read a header-row CSV, selecting columns by name.

    A missing outcome column is allowed; the returned dataset has ``Y=None``
    and complains only when an outcome is actually needed.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvParseError(f"{path}: empty file") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]

    col = {name: j for j, name in enumerate(header)}
    for name in [treatment, *covariates]:
        if name not in col:
            raise MissingColumnError(f"{path}: column {name!r} not found")
    have_y = outcome is not None and outcome in col

    def parse(cell: str, name: str, lineno: int) -> float:
        try:
            return float(cell)
        except ValueError:
            raise CsvParseError(f"{path}:{lineno}: cannot parse {cell!r} in column {name!r}") from None

    X = np.empty((len(rows), len(covariates)))
    T = np.empty(len(rows))
    Y = np.empty(len(rows)) if have_y else None
    for i, row in enumerate(rows):
        lineno = i + 2
        if len(row) != len(header):
            raise CsvParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        t = parse(row[col[treatment]], treatment, lineno)
        if t not in (0.0, 1.0):
            raise NonBinaryTreatmentError(f"{path}:{lineno}: treatment value {row[col[treatment]]!r} is not 0 or 1")
        T[i] = t
        for j, name in enumerate(covariates):
            v = parse(row[col[name]], name, lineno)
            if not math.isfinite(v):
                raise NonFiniteCovariateError(f"{path}:{lineno}: non-finite value in column {name!r}")
            X[i, j] = v
        if have_y:
            Y[i] = parse(row[col[outcome]], outcome, lineno)
    return Dataset(X, T.astype(np.int8), Y, tuple(covariates), outcome or "y")


@dataclass(frozen=True)
class StudentizedView:
    """Studentized covariates ``Z = (X - mu_hat) @ whitener``.

    ``degenerate`` flags constant columns (diagonal mode only); they are
    centered and left at unit scale, i.e. become zero columns.
    """

    Z: np.ndarray
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    whitener: np.ndarray
    mode: str
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    ridge: float = 0.0

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mu_hat) @ self.whitener

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.whitener.T, np.asarray(Z, dtype=float).T).T + self.mu_hat


def studentize(data: Dataset, mode: str = "full") -> StudentizedView:
    """Center by the sample mean and whiten by the (n-1) sample covariance.

    ``full`` uses the symmetric inverse square root of the covariance, so
    ``Z_i . Z_j`` equals the Mahalanobis inner product; ``diagonal`` scales
    each column by its own standard deviation.
    """
    X = data.X
    n, p = X.shape
    mu = X.mean(axis=0)
    Xc = X - mu
    S = Xc.T @ Xc / (n - 1)
    degenerate = np.zeros(p, dtype=bool)
    ridge = 0.0
    if mode == "diagonal":
        sd = np.sqrt(np.diag(S))
        degenerate = sd <= 1e-12 * max(1.0, float(np.abs(X).max()))
        if degenerate.any():
            warnings.warn(
                f"constant covariate column(s) {np.flatnonzero(degenerate).tolist()} left unscaled",
                stacklevel=2,
            )
        scale = np.where(degenerate, 1.0, sd)
        W = np.diag(1.0 / scale)
        Xc = np.where(degenerate, 0.0, Xc)
    elif mode == "full":
        tr = float(np.trace(S))
        evals, evecs = np.linalg.eigh(S)
        if tr <= 0:
            raise DataError("all covariates are constant")
        if evals[0] < 1e-10 * tr:
            ridge = 1e-8 * tr
            evals = evals + ridge
        W = (evecs / np.sqrt(evals)) @ evecs.T
    else:
        raise ValueError(f"unknown studentization mode {mode!r}")
    Z = _frozen(Xc @ W)
    return StudentizedView(Z, _frozen(mu), _frozen(S), _frozen(W), mode, _frozen(degenerate), ridge)
