"""Local weighted least squares, single-scale GWR/GTWR fits and AICc."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .data import Dataset, rowdot
from .errors import (
    DegenerateNeighborhoodError,
    InvalidInputError,
    LocalCollinearityError,
    MGTWRError,
    SingularFitError,
)
from .kernels import GLOBAL, KernelSpec, WeightEngine

# smallest/largest singular value of the weighted design below this => singular
SINGULAR_RTOL = 1e-10
DEFAULT_MAX_CONDITION = 1e10


@dataclass
class LocalFit:
    beta: np.ndarray
    hat_diag: np.ndarray
    residuals: np.ndarray
    trS: float
    aicc: float
    h_s: float = GLOBAL
    h_t: float = GLOBAL

    @property
    def rss(self) -> float:
        return float(self.residuals @ self.residuals)


class ConditionCheck(NamedTuple):
    passed: bool
    condition: float


def aicc(rss: float, n: int, trS: float) -> float:
    """Corrected AIC of a linear smoother.

    ``n ln(rss/n) + n ln(2 pi) + n (n + trS) / (n - 2 - trS)``; returns +inf
    when ``n - 2 - trS <= 0`` so that such candidates are never selected.
    """
    denom = n - 2.0 - trS
    if not denom > 0:
        return math.inf
    if rss <= 0:
        return -math.inf
    return n * math.log(rss / n) + n * math.log(2.0 * math.pi) + n * (n + trS) / denom


def local_condition_guard(X_local, threshold: float = DEFAULT_MAX_CONDITION) -> ConditionCheck:
    """2-norm condition number of ``X_local' X_local``, compared with ``threshold``."""
    s = np.linalg.svd(np.asarray(X_local, dtype=float), compute_uv=False)
    if s.size == 0 or s[-1] <= 0 or not np.isfinite(s[0]):
        return ConditionCheck(False, math.inf)
    cond = (s[0] / s[-1]) ** 2
    if not np.isfinite(cond):
        return ConditionCheck(False, math.inf)
    return ConditionCheck(bool(cond <= threshold), float(cond))


def _effective_n(w):
    sw = w.sum()
    return float(sw * sw / (w @ w)) if sw > 0 else 0.0


def wls_at(focal_index: int, X, y, w, max_condition: float = DEFAULT_MAX_CONDITION):
    """Weighted least squares centred on one observation.

    Returns the local coefficient vector and the focal leverage
    ``w_i x_i' (X'WX)^-1 x_i``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    K = X.shape[1]
    if np.count_nonzero(w > 0) < K:
        if not np.any(w > 0):
            raise DegenerateNeighborhoodError(focal_index)
        raise SingularFitError(focal_index, _effective_n(w))
    sw = np.sqrt(w)
    Xs = X * sw[:, None]
    s = np.linalg.svd(Xs, compute_uv=False)
    if s[-1] < SINGULAR_RTOL * s[0]:
        raise SingularFitError(focal_index, _effective_n(w))
    check = local_condition_guard(Xs, max_condition)
    if not check.passed:
        raise LocalCollinearityError(focal_index, check.condition)
    XtWX = Xs.T @ Xs
    beta = np.linalg.solve(XtWX, Xs.T @ (y * sw))
    xi = X[focal_index]
    leverage = float(w[focal_index] * xi @ np.linalg.solve(XtWX, xi))
    return beta, leverage


def _batched_local(engine: WeightEngine, X, y, h_s, h_t, max_condition, leverage: bool):
    """Local WLS at every focal point of ``engine`` at once.

    Raises the first failing focal point's error, in focal order.
    """
    X = np.asarray(X, dtype=float)
    n, K = X.shape
    W = engine.weights(h_s, h_t)
    XX = (X[:, :, None] * X[:, None, :]).reshape(n, K * K)
    A = engine.weighted_sums(W, XX).reshape(-1, K, K)
    b = engine.weighted_sums(W, X * y[:, None])
    nnz = np.full(engine.m, n) if W is None else np.count_nonzero(W > 0, axis=1)
    evals = np.linalg.eigvalsh(A)
    lo, hi = evals[:, 0], evals[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lo > 0, hi / lo, np.inf)
    # cond(X'WX) = cond(W^1/2 X)^2
    singular = (nnz < K) | ~(lo > (SINGULAR_RTOL**2) * hi)
    collinear = cond > max_condition
    bad = singular | collinear
    if bad.any():
        i = int(np.argmax(bad))
        if nnz[i] == 0:
            raise DegenerateNeighborhoodError(i)
        if nnz[i] < K:
            raise DegenerateNeighborhoodError(i, f"focal point {i} has {nnz[i]} positive weights for {K} covariates")
        w_i = np.ones(n) if W is None else W[i]
        if singular[i]:
            raise SingularFitError(i, _effective_n(w_i))
        raise LocalCollinearityError(i, float(cond[i]))
    beta = np.linalg.solve(A, b[:, :, None])[:, :, 0]
    lev = None
    if leverage:
        sol = np.linalg.solve(A, X[:, :, None])[:, :, 0]
        lev = engine.self_weights(W) * np.einsum("ij,ij->i", X, sol)
    return beta, lev


def gtwr_fit(
    dataset: Dataset,
    h_s=GLOBAL,
    h_t=GLOBAL,
    spec: Optional[KernelSpec] = None,
    max_condition: float = DEFAULT_MAX_CONDITION,
    engine: Optional[WeightEngine] = None,
) -> LocalFit:
    """Single-scale GTWR (or GWR when the spec has no temporal component).

    Every covariate shares the bandwidth pair ``(h_s, h_t)``; ``GLOBAL``
    bandwidths give uniform weights.
    """
    if engine is None:
        engine = WeightEngine(dataset.coords, dataset.times, spec or KernelSpec())
    beta, lev = _batched_local(engine, dataset.X, dataset.y, h_s, h_t, max_condition, leverage=True)
    resid = dataset.y - rowdot(dataset.X, beta)
    trS = float(lev.sum())
    return LocalFit(beta, lev, resid, trS, aicc(float(resid @ resid), dataset.n, trS), h_s, h_t)


def gtwr_predict(dataset: Dataset, h_s, h_t, spec: KernelSpec, coords_new, times_new, X_new,
                 max_condition: float = DEFAULT_MAX_CONDITION):
    """Predict by re-estimating on the training data with new points as focal points.

    Returns ``(y_hat, beta_new)``.
    """
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    if X_new.shape[1] != dataset.K:
        raise InvalidInputError("X_new has the wrong number of columns")
    engine = WeightEngine(dataset.coords, dataset.times, spec, focal_coords=coords_new, focal_times=times_new)
    beta, _ = _batched_local(engine, dataset.X, dataset.y, h_s, h_t, max_condition, leverage=False)
    return rowdot(X_new, beta), beta


def select_gtwr(dataset: Dataset, spec: KernelSpec, grid, max_condition: float = DEFAULT_MAX_CONDITION):
    """Exhaustive AICc search over the bandwidth grid for single-scale GWR/GTWR.

    Candidates whose local fits fail (singular, collinear, degenerate) score
    +inf. Ties go to the coarser pair. Returns ``(best_fit, table)`` where
    ``table`` lists ``(i_s, i_t, aicc)`` for every candidate.
    """
    engine = WeightEngine(dataset.coords, dataset.times, spec, cache_size=max(len(grid.spatial), len(grid.temporal)) + 1)
    t_levels = range(len(grid.temporal)) if spec.has_time else [0]
    table = []
    best = None
    for i_s, i_t in itertools.product(range(len(grid.spatial)), t_levels):
        h_s, h_t = grid.resolve(i_s, i_t)
        try:
            fit = gtwr_fit(dataset, h_s, h_t, spec, max_condition, engine=engine)
            score = fit.aicc
        except MGTWRError:
            fit, score = None, math.inf
        table.append((i_s, i_t, score))
        if fit is not None and (best is None or score < best[0]):
            best = (score, fit)
    if best is None:
        raise SingularFitError(-1, 0.0, "no bandwidth on the grid gives a valid local fit")
    return best[1], table


def univariate_smooth(target, x_k, h_s, h_t, engine: WeightEngine):
    """Local single-regressor smoother used inside backfitting.

    Fits ``target ~ x_k`` (no added intercept) at every focal point:
    ``beta_i = sum_j w_ij x_j t_j / sum_j w_ij x_j^2``. For the intercept
    column this is a local weighted mean. Returns ``(beta, hat_diag)``.
    """
    x_k = np.asarray(x_k, dtype=float)
    target = np.asarray(target, dtype=float)
    W = engine.weights(h_s, h_t)
    sums = engine.weighted_sums(W, np.column_stack([x_k * target, x_k * x_k]))
    num, den = sums[:, 0], sums[:, 1]
    floor = 1e-12 * float(np.mean(x_k * x_k))
    if np.any(~(den > floor)):
        i = int(np.argmax(~(den > floor)))
        w_i = np.ones(engine.n) if W is None else W[i]
        if not np.any(w_i > 0):
            raise DegenerateNeighborhoodError(i)
        raise SingularFitError(i, _effective_n(w_i))
    beta = num / den
    hat = engine.self_weights(W) * x_k * x_k / den
    return beta, hat


def univariate_aicc(target, x_k, h_s, h_t, engine: WeightEngine):
    """AICc of one univariate smoother; +inf for degenerate candidates."""
    try:
        beta, hat = univariate_smooth(target, x_k, h_s, h_t, engine)
    except MGTWRError:
        return math.inf, None
    r = target - beta * x_k
    return aicc(float(r @ r), len(target), float(hat.sum())), beta


def smoother_matrix(x_k, h_s, h_t, engine: WeightEngine):
    """Coefficient operator ``C`` of the univariate smoother: ``beta = C @ target``.

    The fitted-value operator is ``diag(x_k) @ C``.
    """
    x_k = np.asarray(x_k, dtype=float)
    W = engine.weights(h_s, h_t)
    W = np.ones((engine.m, engine.n)) if W is None else W
    C = W * x_k[None, :]
    C /= (C @ x_k)[:, None]
    return C
