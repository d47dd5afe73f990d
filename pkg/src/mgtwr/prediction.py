"""Out-of-sample prediction by sharpened kernel extrapolation of local coefficients.

Each covariate's coefficient at a new point is a weighted average of its
training-point coefficients. The weights come from the estimation kernel at
that covariate's learned bandwidths, normalised per row and then sharpened by
a power ``gamma``. Covariates estimated as global reuse their scalar.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, rowdot
from .errors import InvalidInputError
from .kernels import GLOBAL, KernelSpec, WeightEngine

log = logging.getLogger(__name__)

GAMMA_GRID = (1, 2, 4, 6, 8, 12, 18, 24)
DEFAULT_GAMMA = 8.0


@dataclass
class PredictionModel:
    """Everything needed to extrapolate a multiscale fit to new points.

    Parameters
    ----------
    coords, times : ndarray
        Training locations (n x 2) and timestamps (n,).
    beta : ndarray
        Local coefficients at the training points (n x K).
    bandwidths : ndarray
        Kernel bandwidth pair per covariate (K x 2); ``GLOBAL`` (inf) marks
        a grid maximum.
    spec : KernelSpec
        Kernel configuration used at estimation.
    gamma : float
        Sharpening power, at least 1.
    names : list of str, optional
    """

    coords: np.ndarray
    times: np.ndarray
    beta: np.ndarray
    bandwidths: np.ndarray
    spec: KernelSpec
    gamma: float = DEFAULT_GAMMA
    names: Optional[Sequence[str]] = None
    warnings: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.beta = np.asarray(self.beta, dtype=float)
        self.bandwidths = np.asarray(self.bandwidths, dtype=float).reshape(-1, 2)
        if not self.gamma >= 1:
            raise InvalidInputError("gamma must be at least 1")
        if self.beta.shape[1] != self.bandwidths.shape[0]:
            raise InvalidInputError("one bandwidth pair per covariate is required")
        if self.beta.shape[0] != self.coords.shape[0]:
            raise InvalidInputError("beta rows must match training points")

    @classmethod
    def from_fit(cls, fit, dataset: Dataset, gamma: float = DEFAULT_GAMMA) -> "PredictionModel":
        bw = np.array([fit.kernel_bandwidth(k) for k in range(fit.K)], dtype=float)
        return cls(dataset.coords, dataset.times, fit.beta, bw, fit.spec, gamma, list(fit.names))

    @property
    def K(self) -> int:
        return self.beta.shape[1]

    @property
    def global_flags(self) -> np.ndarray:
        """True for covariates whose two bandwidths sit at the grid maxima."""
        spatial_global = np.isinf(self.bandwidths[:, 0])
        if not self.spec.has_time:
            return spatial_global
        return spatial_global & np.isinf(self.bandwidths[:, 1]) & (self.spec.symmetry != "forward")

    def global_coefficient(self, k: int) -> float:
        return float(self.beta[0, k])

    def _engine(self, coords_new, times_new) -> WeightEngine:
        return WeightEngine(self.coords, self.times, self.spec, focal_coords=coords_new, focal_times=times_new,
                            cache_size=2 * self.K + 2)


def _check_points(coords_new, times_new):
    c = np.atleast_2d(np.asarray(coords_new, dtype=float))
    t = np.atleast_1d(np.asarray(times_new, dtype=float)).ravel()
    if c.shape[1] != 2 or c.shape[0] != t.shape[0]:
        raise InvalidInputError("new coordinates must be m x 2 with one timestamp per row")
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(t))):
        raise InvalidInputError("new points must be finite")
    return c, t


def _nearest(engine: WeightEngine, rows):
    """Index of the nearest training point for each focal row (space, then time)."""
    out = np.empty(len(rows), dtype=int)
    for i, r in enumerate(rows):
        d = engine.distances[r]
        allowed = np.ones(engine.n, dtype=bool)
        if engine.spec.has_time and engine.spec.symmetry == "forward":
            allowed = ~engine.future_mask[r]
            if not allowed.any():
                allowed[:] = True
        cand = np.flatnonzero(allowed)
        td = engine.time_distances[r, cand] if engine.spec.has_time else np.zeros(cand.size)
        out[i] = cand[np.lexsort((td, d[cand]))[0]]
    return out


def _preweights(model: PredictionModel, k: int, engine: WeightEngine, warnings=None):
    h_s, h_t = model.bandwidths[k]
    W = engine.weights(h_s, h_t)
    m, n = engine.m, engine.n
    if W is None:
        return np.full((m, n), 1.0 / n)
    W = np.array(W, dtype=float, copy=True)
    s = W.sum(axis=1)
    empty = ~(s > 0)
    if empty.any():
        rows = np.flatnonzero(empty)
        nn = _nearest(engine, rows)
        W[rows] = 0.0
        W[rows, nn] = 1.0
        s[rows] = 1.0
        msg = f"covariate {k}: {rows.size} prediction point(s) had no positive kernel weight; nearest training point used"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
    W /= s[:, None]
    return W


def preweights(model: PredictionModel, k: int, point, time) -> np.ndarray:
    """Normalised kernel weights from the training points to one new point."""
    c, t = _check_points(np.reshape(point, (1, 2)), [time])
    return _preweights(model, k, model._engine(c, t), model.warnings)[0]


def sharpen(w, gamma: float, warnings=None) -> np.ndarray:
    """Power-sharpen normalised weights: ``w**gamma / sum(w**gamma)``, per row.

    Computed in log space relative to each row's maximum, so rows never
    underflow to all zeros.
    """
    w = np.asarray(w, dtype=float)
    if not gamma >= 1:
        raise InvalidInputError("gamma must be at least 1")
    if np.any(w < 0):
        raise InvalidInputError("weights must be non-negative")
    single = w.ndim == 1
    W = np.atleast_2d(w)
    if gamma == 1:
        out = W / W.sum(axis=1, keepdims=True)
        return out[0] if single else out
    mx = W.max(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        z = np.where(W > 0, gamma * (np.log(W) - np.log(mx)), -np.inf)
    out = np.exp(z)
    s = out.sum(axis=1, keepdims=True)
    bad = ~(s[:, 0] > 0) | ~np.isfinite(s[:, 0])
    if bad.any():
        msg = f"{int(bad.sum())} sharpened row(s) underflowed; argmax weight kept"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        idx = np.flatnonzero(bad)
        out[idx] = 0.0
        out[idx, W[idx].argmax(axis=1)] = 1.0
        s[idx] = 1.0
    out /= s
    return out[0] if single else out


def _coefficients(model: PredictionModel, engine: WeightEngine, gammas=None):
    """Extrapolated coefficient matrices, one per gamma (m x K each)."""
    gammas = [model.gamma] if gammas is None else list(gammas)
    flags = model.global_flags
    outs = [np.empty((engine.m, model.K)) for _ in gammas]
    for k in range(model.K):
        if flags[k]:
            for o in outs:
                o[:, k] = model.global_coefficient(k)
            continue
        W = _preweights(model, k, engine, model.warnings)
        for o, g in zip(outs, gammas):
            o[:, k] = sharpen(W, g, model.warnings) @ model.beta[:, k]
    return outs


def extrapolate_coefficient(model: PredictionModel, k: int, point, time) -> float:
    """Sharpened-weight average of covariate ``k``'s training coefficients at one point."""
    if model.global_flags[k]:
        return model.global_coefficient(k)
    w = sharpen(preweights(model, k, point, time), model.gamma, model.warnings)
    return float(w @ model.beta[:, k])


def extrapolate(model: PredictionModel, coords_new, times_new) -> np.ndarray:
    """Coefficient matrix (m x K) at new points."""
    c, t = _check_points(coords_new, times_new)
    return _coefficients(model, model._engine(c, t))[0]


def predict(model: PredictionModel, X_new, coords_new, times_new) -> np.ndarray:
    """``y_hat_o = sum_k x_ok beta_k(o)`` for every new point."""
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    c, t = _check_points(coords_new, times_new)
    if X_new.shape != (c.shape[0], model.K):
        raise InvalidInputError(f"X_new must have shape ({c.shape[0]}, {model.K})")
    if not np.all(np.isfinite(X_new)):
        raise InvalidInputError("X_new must be finite")
    B = extrapolate(model, c, t)
    return rowdot(X_new, B)


def _pick_gamma(scores, grid):
    scores = np.asarray(scores, dtype=float)
    best = np.nanmin(scores)
    tol = 1e-12 * max(abs(best), 1e-300)
    winners = [g for g, s in zip(grid, scores) if s <= best + tol]
    return float(min(winners, key=lambda g: (abs(g - DEFAULT_GAMMA), g)))


def cv_gamma(model: PredictionModel, train_dataset: Dataset, folds: int = 5, grid=GAMMA_GRID, seed: int = 0,
             return_scores: bool = False):
    """Choose the sharpening power by k-fold cross-validation.

    Each fold refits the multiscale model by backfitting at the learned
    bandwidths (adaptive neighbour counts are rescaled to the fold size),
    then predicts the held-out points for every candidate ``gamma``. Ties go
    to the candidate closest to 8.
    """
    from .tds import backfit_bandwidths

    n = train_dataset.n
    if n < folds * (train_dataset.K + 2):
        raise InvalidInputError("too few training points for the requested number of folds")
    grid = [float(g) for g in grid]
    rng = np.random.default_rng(seed)
    assign = np.empty(n, dtype=int)
    assign[rng.permutation(n)] = np.arange(n) % folds
    sse = np.zeros(len(grid))
    for f in range(folds):
        tr, te = np.flatnonzero(assign != f), np.flatnonzero(assign == f)
        sub = train_dataset.subset(tr)
        pairs = [tuple(_fold_bandwidth(model.spec, model.bandwidths[k], n, tr.size)) for k in range(model.K)]
        beta, *_ = backfit_bandwidths(sub, model.spec, pairs)
        fm = PredictionModel(sub.coords, sub.times, beta, np.array(pairs), model.spec, model.gamma, model.names)
        engine = fm._engine(train_dataset.coords[te], train_dataset.times[te])
        for j, B in enumerate(_coefficients(fm, engine, grid)):
            r = train_dataset.y[te] - rowdot(train_dataset.X[te], B)
            sse[j] += float(r @ r)
    scores = np.sqrt(sse / n)
    g = _pick_gamma(scores, grid)
    return (g, scores) if return_scores else g


def _fold_bandwidth(spec: KernelSpec, pair, n_full: int, n_fold: int):
    h_s, h_t = (float(v) for v in pair)
    if spec.spatial_adaptive and not math.isinf(h_s):
        h_s = float(max(2, min(n_fold, round(h_s * n_fold / n_full))))
    if spec.has_time and spec.temporal_adaptive and not math.isinf(h_t):
        h_t = float(max(2, min(n_fold, round(h_t * n_fold / n_full))))
    return h_s, h_t
