"""Hat-matrix inference for multiscale fits.

The exact method replays the recorded backfitting updates as matrix
operations. Let ``B_k`` be the n x n map from ``y`` to covariate ``k``'s local
coefficients and ``R_k = diag(x_k) B_k`` the map to its partial fit. Starting
from OLS, every update of covariate ``k`` with univariate smoother ``C_k``
sets ``B_k <- C_k (I - sum_{j != k} R_j)``. The hat matrix is ``S = sum_k R_k``
and ``S y`` reproduces the fitted values of the replayed run.

The local approximation treats each final univariate smoother in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .data import Dataset
from .errors import InferenceDisabledError, InferenceInfeasibleError, InvalidInputError
from .kernels import WeightEngine
from .local_regression import aicc, smoother_matrix, univariate_smooth

INFERENCE_CAP = 5000
METHODS = ("exact", "local_approx")
LEVELS = (0.10, 0.05, 0.01)


@dataclass
class SmootherLedger:
    """Coefficient maps ``B`` (K x n x n) and the hat matrix ``S``."""

    B: np.ndarray
    S: np.ndarray

    @property
    def trS(self) -> float:
        return float(np.trace(self.S))

    def partial_map(self, k: int, X) -> np.ndarray:
        return np.asarray(X, dtype=float)[:, k][:, None] * self.B[k]


@dataclass
class InferenceResult:
    trS: float
    sigma2_hat: float
    se: np.ndarray
    t_stats: np.ndarray
    p_raw: np.ndarray
    p_fdr: np.ndarray
    method: str
    names: Optional[list] = None
    aicc: Optional[float] = None
    df: Optional[float] = None

    def significance_table(self, levels=LEVELS):
        """Per covariate: mean SE and % of locations significant, raw and FDR-adjusted."""
        names = self.names or [f"b{k}" for k in range(self.se.shape[1])]
        rows = []
        for k, name in enumerate(names):
            row = {"covariate": name, "method": self.method, "mean_se": float(np.nanmean(self.se[:, k]))}
            for a in levels:
                row[f"pct_sig_{round(a * 100)}"] = 100.0 * float(np.mean(self.p_raw[:, k] < a))
            for a in levels:
                row[f"pct_sig_{round(a * 100)}_fdr"] = 100.0 * float(np.mean(self.p_fdr[:, k] < a))
            rows.append(row)
        return rows


def _check_cap(n: int, cap: int):
    if n > cap:
        raise InferenceDisabledError(
            f"n={n} exceeds the inference cap of {cap}; the full hat matrix needs O(n^2) memory. "
            "Use prediction-only mode, or raise the cap explicitly."
        )


def _engine(dataset: Dataset, fit) -> WeightEngine:
    return WeightEngine(dataset.coords, dataset.times, fit.spec, cache_size=2 * dataset.K + 2)


def accumulate_hat(fit, dataset: Dataset, cap: int = INFERENCE_CAP) -> SmootherLedger:
    """Replay the fit's update trace as matrix operations.

    ``fit.trace`` holds the ``(k, i_s, i_t)`` updates in the order they were
    applied, starting from the OLS initialisation.
    """
    n, K = dataset.n, dataset.K
    _check_cap(n, cap)
    X = dataset.X
    engine = _engine(dataset, fit)
    ols_map = np.linalg.pinv(X)  # K x n
    B = np.empty((K, n, n))
    for k in range(K):
        B[k] = ols_map[k][None, :]
    S = np.einsum("ik,kij->ij", X, B)
    eye = np.eye(n)
    cache = {}
    for k, i_s, i_t in fit.trace:
        key = (k, i_s, i_t)
        C = cache.get(key)
        if C is None:
            C = smoother_matrix(X[:, k], *fit.grid.resolve(i_s, i_t), engine)
            cache = {kk: vv for kk, vv in cache.items() if kk[0] != k}
            cache[key] = C
        Rk_old = X[:, k][:, None] * B[k]
        B[k] = C @ (eye - S + Rk_old)
        S += X[:, k][:, None] * B[k] - Rk_old
    return SmootherLedger(B, S)


def fdr_adjust(p_raw) -> np.ndarray:
    """Benjamini-Yekutieli step-up adjustment, applied to each column separately."""
    p = np.asarray(p_raw, dtype=float)
    single = p.ndim == 1
    P = p[:, None] if single else p
    if np.any((P < 0) | (P > 1)):
        raise InvalidInputError("p-values must lie in [0, 1]")
    m = P.shape[0]
    c_m = float(np.sum(1.0 / np.arange(1, m + 1)))
    out = np.empty_like(P)
    ranks = np.arange(1, m + 1)
    for j in range(P.shape[1]):
        order = np.argsort(P[:, j], kind="stable")
        adj = P[order, j] * m * c_m / ranks
        adj = np.minimum.accumulate(adj[::-1])[::-1]
        out[order, j] = np.minimum(adj, 1.0)
    return out[:, 0] if single else out


def _pvalues(t, reference: str, df: Optional[float]):
    if reference == "normal":
        return 2.0 * stats.norm.sf(np.abs(t))
    if reference == "t":
        return 2.0 * stats.t.sf(np.abs(t), df)
    raise InvalidInputError(f"unknown reference distribution {reference!r}")


def _finish(fit, se, sigma2, trS, method, reference, df, aicc_value):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, fit.beta / se, np.nan)
    p = _pvalues(t, reference, df)
    p = np.where(np.isnan(p), 1.0, p)
    return InferenceResult(trS, sigma2, se, t, p, fdr_adjust(p), method, list(fit.names), aicc_value, df)


def exact_se(ledger: SmootherLedger, fit, p_f: int = 0, reference: str = "normal") -> InferenceResult:
    """Standard errors from the composed coefficient maps.

    ``sigma2 = RSS / (n - trS - p_f)`` and ``SE_ik = sqrt(sigma2 * sum_j B_k[i, j]^2)``.
    """
    n = fit.residuals.shape[0]
    trS = ledger.trS
    df = n - trS - p_f
    if not df > 0:
        raise InferenceInfeasibleError(f"non-positive residual degrees of freedom ({df:.3g})")
    rss = float(fit.residuals @ fit.residuals)
    sigma2 = rss / df
    v = np.einsum("kij,kij->ik", ledger.B, ledger.B)
    se = np.sqrt(sigma2 * v)
    return _finish(fit, se, sigma2, trS, "exact", reference, df, aicc(rss, n, trS))


def _all_global(fit) -> bool:
    return all(fit.is_global(k) for k in range(fit.K)) and fit.spec.symmetry != "forward"


def _ols_result(fit, dataset: Dataset, method: str, reference: str):
    X = dataset.X
    n, K = X.shape
    rss = float(fit.residuals @ fit.residuals)
    sigma2 = rss / (n - K)
    cov = sigma2 * np.linalg.inv(X.T @ X)
    se = np.tile(np.sqrt(np.diag(cov)), (n, 1))
    return _finish(fit, se, sigma2, float(K), method, reference, float(n - K), aicc(rss, n, float(K)))


def local_approx_se(fit, dataset: Dataset, reference: str = "normal") -> InferenceResult:
    """Standard errors from each final univariate smoother on its own.

    For covariate ``k`` with smoother ``C_k`` applied to its final partial
    residual ``e_k``: ``sigma2_k = |e_k - x_k C_k e_k|^2 / (n - tr A_k)`` and
    ``SE_ik = sqrt(sigma2_k * sum_j C_k[i, j]^2)``. An all-global model falls
    back to the OLS standard errors, matching the exact method.
    """
    if _all_global(fit):
        return _ols_result(fit, dataset, "local_approx", reference)
    n, K = dataset.n, dataset.K
    X, y = dataset.X, dataset.y
    engine = _engine(dataset, fit)
    f = fit.beta * X
    se = np.empty((n, K))
    tr_total = 0.0
    for k in range(K):
        h_s, h_t = fit.kernel_bandwidth(k)
        partial = y - (f.sum(axis=1) - f[:, k])
        beta_k, hat = univariate_smooth(partial, X[:, k], h_s, h_t, engine)
        r = partial - beta_k * X[:, k]
        trA = float(hat.sum())
        tr_total += trA
        sigma2_k = float(r @ r) / max(n - trA, 1e-12)
        C = smoother_matrix(X[:, k], h_s, h_t, engine)
        se[:, k] = np.sqrt(sigma2_k * np.einsum("ij,ij->i", C, C))
    rss = float(fit.residuals @ fit.residuals)
    sigma2 = rss / (n - tr_total) if n > tr_total else math.nan
    return _finish(fit, se, sigma2, tr_total, "local_approx", reference, n - tr_total, None)


def infer(fit, dataset: Dataset, method: str = "exact", p_f: int = 0, reference: str = "normal",
          cap: int = INFERENCE_CAP) -> InferenceResult:
    """Run inference with either ``exact`` or ``local_approx`` standard errors."""
    if method not in METHODS:
        raise InvalidInputError(f"unknown inference method {method!r}")
    if method == "local_approx":
        return local_approx_se(fit, dataset, reference)
    return exact_se(accumulate_hat(fit, dataset, cap), fit, p_f, reference)
