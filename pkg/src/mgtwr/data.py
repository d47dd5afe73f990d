from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError


@dataclass
class Dataset:
    """Observations for a spatio-temporal varying-coefficient regression.

    ``X`` carries the intercept as its first column.
    """

    coords: np.ndarray
    times: np.ndarray
    X: np.ndarray
    y: np.ndarray
    names: Optional[Sequence[str]] = None
    year: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.y.shape[0]
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise InvalidInputError("X must be an n x K matrix matching y")
        if self.coords.shape != (n, 2):
            raise InvalidInputError("coords must be an n x 2 matrix")
        if self.times.shape[0] != n:
            raise InvalidInputError("times must have length n")
        for name, arr in (("coords", self.coords), ("times", self.times), ("X", self.X), ("y", self.y)):
            bad = ~np.isfinite(arr)
            if bad.any():
                row = int(np.argwhere(bad)[0][0])
                raise InvalidInputError(f"non-finite value in {name} at row {row}")
        if n <= self.K:
            raise InvalidInputError(f"need more observations than covariates (n={n}, K={self.K})")
        if not np.all(self.X[:, 0] == 1.0):
            raise InvalidInputError("first column of X must be the intercept (all ones)")
        sd = self.X[:, 1:].std(axis=0)
        if np.any(sd == 0):
            k = int(np.argmax(sd == 0)) + 1
            raise InvalidInputError(f"covariate column {self.covariate_names[k]!r} is constant")
        if self.names is not None and len(self.names) != self.K:
            raise InvalidInputError("names must have one entry per column of X")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def covariate_names(self) -> list:
        if self.names is not None:
            return list(self.names)
        return ["Intercept"] + [f"x{k}" for k in range(1, self.K)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.coords[idx],
            self.times[idx],
            self.X[idx],
            self.y[idx],
            names=self.names,
            year=None if self.year is None else self.year[idx],
        )


def rowdot(X, B) -> np.ndarray:
    """Row-wise inner products ``sum_k X[i, k] B[i, k]`` summed in column order.

    The fixed order makes the result independent of memory layout, which
    ``einsum`` does not guarantee.
    """
    X = np.asarray(X, dtype=float)
    B = np.asarray(B, dtype=float)
    out = X[:, 0] * B[:, 0]
    for k in range(1, X.shape[1]):
        out = out + X[:, k] * B[:, k]
    return out


def ols(X, y):
    """Least-squares coefficients via a rank-revealing solver."""
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return beta
