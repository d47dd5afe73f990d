"""Top-Down Scale multiscale backfitting.

All covariates start at the OLS limit (the coarsest level of each bandwidth
grid). Each backfitting update of covariate ``k`` smooths its partial residual
with a univariate local smoother, choosing among a handful of neighbouring
grid levels the pair with the lowest univariate AICc.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .data import Dataset, ols
from .errors import InvalidInputError, StuckCovariateError
from .kernels import GLOBAL, KernelSpec, WeightEngine
from .local_regression import univariate_aicc, univariate_smooth

log = logging.getLogger(__name__)

ORDER_STRATEGIES = ("fixed_cyclic", "random", "importance")


# -- grids -----------------------------------------------------------------------


def geometric_levels(h_max: float, h_min: float, M: int, integer: bool = False):
    """Strictly decreasing geometric sequence from ``h_max`` to ``h_min``.

    Integer levels are rounded and de-duplicated, so fewer than ``M`` levels
    may come back.
    """
    if M < 1:
        raise InvalidInputError("M must be positive")
    if M == 1 or h_min >= h_max:
        return np.array([float(round(h_max)) if integer else float(h_max)])
    levels = h_max * (h_min / h_max) ** (np.arange(M) / (M - 1))
    levels[0], levels[-1] = h_max, h_min
    if integer:
        levels = np.round(levels)
        _, first = np.unique(levels, return_index=True)
        levels = levels[np.sort(first)]
    return levels.astype(float)


@dataclass
class BandwidthGrid:
    """Ordered candidate bandwidths per dimension, coarsest first.

    Index 0 of each grid is the OLS-limit sentinel: it is reported with its
    nominal value but evaluated with uniform weights.
    """

    spatial: np.ndarray
    temporal: np.ndarray
    spatial_adaptive: bool = True
    temporal_adaptive: bool = False
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.spatial = np.asarray(self.spatial, dtype=float)
        self.temporal = np.asarray(self.temporal, dtype=float)
        for name, g in (("spatial", self.spatial), ("temporal", self.temporal)):
            if g.ndim != 1 or g.size == 0:
                raise InvalidInputError(f"{name} grid must be a non-empty sequence")
            if np.any(np.diff(g) >= 0):
                raise InvalidInputError(f"{name} grid must be strictly decreasing")

    def resolve(self, i_s: int, i_t: int = 0):
        """Kernel bandwidths for grid indices (``GLOBAL`` at index 0)."""
        h_s = GLOBAL if i_s == 0 else float(self.spatial[i_s])
        h_t = GLOBAL if i_t == 0 else float(self.temporal[i_t])
        return h_s, h_t

    def spatial_only(self) -> "BandwidthGrid":
        return BandwidthGrid(self.spatial, self.temporal[:1], self.spatial_adaptive, self.temporal_adaptive,
                             list(self.warnings))

    def to_dict(self) -> dict:
        return {
            "spatial": self.spatial.tolist(),
            "temporal": self.temporal.tolist(),
            "spatial_adaptive": self.spatial_adaptive,
            "temporal_adaptive": self.temporal_adaptive,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d) -> "BandwidthGrid":
        return cls(np.array(d["spatial"]), np.array(d["temporal"]), d["spatial_adaptive"],
                   d["temporal_adaptive"], list(d.get("warnings", [])))


_COMPACT_PAD = {"gaussian": 1.0, "bisquare": 1.0 + 1e-6}


def _kth_neighbor_radius(points, k):
    """Largest, over points, distance to the k-th nearest point (self included)."""
    tree = cKDTree(points)
    d, _ = tree.query(points, k=k)
    return float(np.max(d[:, -1] if d.ndim == 2 else d))


def build_grid(dataset: Dataset, M: int, spec: KernelSpec, M_t: Optional[int] = None,
               min_neighbors: Optional[int] = None) -> BandwidthGrid:
    """Geometric bandwidth grids between the OLS limit and a minimum neighbourhood.

    The largest level is ``n`` (adaptive) or the bounding-box diagonal
    (distance). The smallest keeps at least ``min_neighbors`` (default
    ``K + 2``) observations within the bandwidth of every focal point.
    Temporal grids use the observed time span, or half the cycle length for
    cyclic kernels.
    """
    if M < 3:
        raise InvalidInputError("M must be at least 3")
    M_t = M if M_t is None else M_t
    n = dataset.n
    kmin = min(n, (dataset.K + 2) if min_neighbors is None else int(min_neighbors))
    warnings = []

    if spec.spatial_adaptive:
        # a compact kernel gives the k-th neighbour zero weight
        k_lo = min(n, kmin + (spec.spatial_family == "bisquare"))
        hs = geometric_levels(n, k_lo, M, integer=True)
    else:
        lo, hi = dataset.coords.min(axis=0), dataset.coords.max(axis=0)
        h_max = float(np.hypot(*(hi - lo)))
        h_min = _kth_neighbor_radius(dataset.coords, kmin) * _COMPACT_PAD[spec.spatial_family]
        hs = geometric_levels(h_max, h_min, M)
    if len(hs) < M:
        warnings.append(f"spatial grid shortened to {len(hs)} distinct levels (requested {M})")

    if not spec.has_time:
        ht = np.array([GLOBAL])
    elif spec.temporal_adaptive:
        ht = geometric_levels(n, min(n, kmin + (spec.temporal_family == "bisquare")), M_t, integer=True)
    else:
        t = dataset.times
        if spec.cyclic:
            C = spec.cycle_length
            R = C / (2.0 * math.pi)
            ang = 2.0 * math.pi * np.mod(t, C) / C
            chord = _kth_neighbor_radius(np.column_stack([R * np.cos(ang), R * np.sin(ang)]), kmin)
            h_min = 2.0 * R * math.asin(min(1.0, chord / (2.0 * R)))
            h_max = min(C / 2.0, float(t.max() - t.min()))
        else:
            h_min = _kth_neighbor_radius(t[:, None], kmin)
            h_max = float(t.max() - t.min())
        # integer-valued times can yield a zero radius
        h_min = max(h_min * _COMPACT_PAD[spec.temporal_family], 1e-9 * max(h_max, 1.0))
        ht = geometric_levels(h_max, h_min, M_t) if h_max > 0 else np.array([1.0])
    if spec.has_time and len(ht) < M_t:
        warnings.append(f"temporal grid shortened to {len(ht)} distinct levels (requested {M_t})")
    for w in warnings:
        log.warning(w)
    return BandwidthGrid(hs, ht, spec.spatial_adaptive, spec.temporal_adaptive, warnings)


# -- configuration and state -------------------------------------------------------


@dataclass
class TdsConfig:
    M: int = 20
    order_strategy: str = "importance"
    delta_rmse_tol: float = 1e-5
    patience: int = 2
    max_iterations: int = 200
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.M < 3:
            raise InvalidInputError("M must be at least 3")
        if self.patience < 1:
            raise InvalidInputError("patience must be at least 1")
        if self.order_strategy not in ORDER_STRATEGIES:
            raise InvalidInputError(f"unknown order strategy {self.order_strategy!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class ScaleState:
    """Current grid indices ``(K, 2)``, local coefficients and partial fits ``(n, K)``."""

    indices: np.ndarray
    beta: np.ndarray
    X: np.ndarray

    @property
    def f(self):
        return self.beta * self.X

    def at_spatial_max(self, k):
        return self.indices[k, 0] == 0

    def at_temporal_max(self, k):
        return self.indices[k, 1] == 0


def candidate_set(k: int, indices, grid: BandwidthGrid):
    """Candidate grid-index pairs for covariate ``k``, in grid order.

    Per dimension: the current level, its two grid neighbours, and the finest
    level currently held by any other covariate.
    """
    indices = np.asarray(indices)
    others = np.delete(indices, k, axis=0)

    def one_dim(col, size):
        cur = int(indices[k, col])
        cand = {cur, cur - 1, cur + 1}
        if len(others):
            cand.add(int(others[:, col].max()))
        return sorted(c for c in cand if 0 <= c < size)

    cs = one_dim(0, len(grid.spatial))
    ct = one_dim(1, len(grid.temporal))
    return [(a, b) for a in cs for b in ct]


def importance_scores(state: ScaleState, X=None):
    """Scale-normalised contribution of each covariate to the fitted signal.

    ``mean_i |beta_ik x_ik| / sd(x_k)``; the intercept column uses ``sd = 1``.
    """
    X = state.X if X is None else np.asarray(X, dtype=float)
    s = X.std(axis=0)
    s[0] = 1.0
    if np.any(s[1:] == 0):
        raise InvalidInputError("constant non-intercept covariate")
    return np.abs(state.beta * X).mean(axis=0) / s


def update_order(strategy: str, state: ScaleState, rng: np.random.Generator):
    K = state.X.shape[1]
    if strategy == "fixed_cyclic":
        return list(range(K))
    if strategy == "random":
        return [int(k) for k in rng.permutation(K)]
    scores = importance_scores(state)
    rest = np.argsort(-scores[1:], kind="stable") + 1
    return [0] + [int(k) for k in rest]


def steepest_descent_step(k: int, state: ScaleState, y, grid: BandwidthGrid, engine: WeightEngine,
                          workers: int = 1):
    """Pick the lowest-AICc candidate pair for covariate ``k``.

    Returns ``(best_pair, best_aicc, moved, beta_k)``. Ties go to the coarser
    spatial, then temporal, level. Raises :class:`StuckCovariateError` when
    every candidate is degenerate.
    """
    X = state.X
    partial = y - (state.f.sum(axis=1) - state.f[:, k])
    cands = candidate_set(k, state.indices, grid)

    def score(pair):
        h_s, h_t = grid.resolve(*pair)
        return univariate_aicc(partial, X[:, k], h_s, h_t, engine)

    if workers > 1 and len(cands) > 1:
        for a, b in cands:
            h_s, h_t = grid.resolve(a, b)
            engine.spatial(h_s)
            engine.temporal(h_t)
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(score, cands))
    else:
        results = [score(p) for p in cands]

    best = None
    for pair, (a, beta) in zip(cands, results):
        if math.isinf(a) and a > 0:
            continue
        if best is None or a < best[1]:
            best = (pair, a, beta)
    if best is None:
        raise StuckCovariateError(k)
    current = tuple(int(v) for v in state.indices[k])
    return best[0], best[1], best[0] != current, best[2]


# -- results -----------------------------------------------------------------------


@dataclass
class FitResult:
    """Outcome of multiscale backfitting."""

    beta: np.ndarray
    residuals: np.ndarray
    y: np.ndarray
    indices: np.ndarray
    grid: BandwidthGrid
    spec: KernelSpec
    names: list
    converged: bool
    n_sweeps: int
    rmse_history: list
    log: list
    trace: list
    warnings: list
    config: Optional[TdsConfig] = None
    aicc: Optional[float] = None

    @property
    def fitted(self):
        return self.y - self.residuals

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.residuals**2)))

    @property
    def K(self):
        return self.beta.shape[1]

    def bandwidth(self, k):
        """Reported ``(h_s, h_t)`` grid values for covariate ``k``."""
        i_s, i_t = self.indices[k]
        h_t = float(self.grid.temporal[i_t]) if self.spec.has_time else GLOBAL
        return float(self.grid.spatial[i_s]), h_t

    def kernel_bandwidth(self, k):
        """Bandwidths as used by the kernel (``GLOBAL`` at grid maxima)."""
        return self.grid.resolve(*self.indices[k])

    def at_spatial_max(self, k):
        return bool(self.indices[k, 0] == 0)

    def at_temporal_max(self, k):
        return bool(self.indices[k, 1] == 0)

    def is_global(self, k):
        return self.at_spatial_max(k) and self.at_temporal_max(k)

    def scale_kind(self, k) -> str:
        s, t = self.at_spatial_max(k), self.at_temporal_max(k)
        if s and t:
            return "global"
        if t:
            return "spatial_only"
        if s:
            return "temporal_only"
        return "spatio_temporal"

    def bandwidth_table(self):
        rows = []
        for k in range(self.K):
            h_s, h_t = self.bandwidth(k)
            rows.append({
                "covariate": self.names[k],
                "h_s": h_s,
                "h_t": h_t if self.spec.has_time else None,
                "i_s": int(self.indices[k, 0]),
                "i_t": int(self.indices[k, 1]),
                "at_spatial_max": self.at_spatial_max(k),
                "at_temporal_max": self.at_temporal_max(k),
                "kind": self.scale_kind(k),
            })
        return rows


def _rmse(r):
    return float(np.sqrt(np.mean(r * r)))


def _engine_for(dataset: Dataset, spec: KernelSpec):
    budget = 1.2e9 / (8.0 * dataset.n * dataset.n) / 2
    return WeightEngine(dataset.coords, dataset.times, spec, cache_size=int(min(24, max(4, budget))))


def _ols_state(dataset: Dataset):
    b = ols(dataset.X, dataset.y)
    beta = np.tile(b, (dataset.n, 1))
    return ScaleState(np.zeros((dataset.K, 2), dtype=int), beta, dataset.X)


def backfit(dataset: Dataset, spec: KernelSpec, config: Optional[TdsConfig] = None,
            grid: Optional[BandwidthGrid] = None, engine: Optional[WeightEngine] = None) -> FitResult:
    """Calibrate a multiscale (M)GTWR by Top-Down Scale backfitting.

    Stops once the relative RMSE improvement of a full sweep stays below
    ``config.delta_rmse_tol`` for ``config.patience`` consecutive sweeps, or
    after ``config.max_iterations`` sweeps (``converged=False``).
    """
    config = config or TdsConfig()
    grid = grid or build_grid(dataset, config.M, spec)
    if not spec.has_time and len(grid.temporal) > 1:
        grid = grid.spatial_only()
    engine = engine or _engine_for(dataset, spec)
    rng = np.random.default_rng(config.seed)
    y, X = dataset.y, dataset.X
    state = _ols_state(dataset)
    fit_log, trace, warnings = [], [], list(grid.warnings)

    rmse_prev = _rmse(y - state.f.sum(axis=1))
    history = [rmse_prev]
    stall, converged, sweep = 0, False, 0
    for sweep in range(1, config.max_iterations + 1):
        order = update_order(config.order_strategy, state, rng)
        for k in order:
            old = tuple(int(v) for v in state.indices[k])
            try:
                pair, score, moved, beta_k = steepest_descent_step(k, state, y, grid, engine, config.workers)
            except StuckCovariateError as exc:
                warnings.append(f"sweep {sweep}: {exc}")
                continue
            state.indices[k] = pair
            state.beta[:, k] = beta_k
            trace.append((k, int(pair[0]), int(pair[1])))
            fit_log.append({"sweep": sweep, "covariate": k, "old": list(old), "new": [int(pair[0]), int(pair[1])],
                            "moved": bool(moved), "aicc": float(score)})
        rmse_cur = _rmse(y - state.f.sum(axis=1))
        history.append(rmse_cur)
        if rmse_cur > rmse_prev + 1e-9:
            warnings.append(f"sweep {sweep}: RMSE rose from {rmse_prev:.6g} to {rmse_cur:.6g}")
        for rec in fit_log:
            if rec["sweep"] == sweep:
                rec["rmse"] = rmse_cur
        rel = (rmse_prev - rmse_cur) / rmse_prev if rmse_prev > 0 else 0.0
        stall = stall + 1 if rel < config.delta_rmse_tol else 0
        rmse_prev = rmse_cur
        if stall >= config.patience:
            converged = True
            break

    resid = y - state.f.sum(axis=1)
    return FitResult(state.beta, resid, y, state.indices, grid, spec, dataset.covariate_names, converged, sweep,
                     history, fit_log, trace, warnings, config)


def backfit_fixed(dataset: Dataset, spec: KernelSpec, grid: BandwidthGrid, indices, tol: float = 1e-10,
                  max_iterations: int = 1000, engine: Optional[WeightEngine] = None) -> FitResult:
    """Backfitting with every covariate held at the given grid indices.

    Starts from OLS and cycles through covariates in column order until the
    largest change in fitted values falls below ``tol`` times the response
    scale.
    """
    indices = np.asarray(indices, dtype=int).reshape(dataset.K, 2)
    pairs = [grid.resolve(*indices[k]) for k in range(dataset.K)]
    beta, converged, sweep, trace = backfit_bandwidths(dataset, spec, pairs, tol, max_iterations, engine)
    for i, (k, _, _) in enumerate(trace):
        trace[i] = (k, int(indices[k, 0]), int(indices[k, 1]))
    resid = dataset.y - (beta * dataset.X).sum(axis=1)
    return FitResult(beta, resid, dataset.y, indices.copy(), grid, spec, dataset.covariate_names, converged, sweep,
                     [_rmse(resid)], [], trace, [])


def backfit_bandwidths(dataset: Dataset, spec: KernelSpec, bandwidths, tol: float = 1e-10,
                       max_iterations: int = 1000, engine: Optional[WeightEngine] = None):
    """Fixed-bandwidth backfitting from explicit kernel bandwidth pairs.

    Returns ``(beta, converged, n_sweeps, trace)`` where ``trace`` lists the
    ``(k, h_s, h_t)`` updates in order.
    """
    engine = engine or _engine_for(dataset, spec)
    y, X = dataset.y, dataset.X
    state = _ols_state(dataset)
    scale = max(float(np.abs(y).max()), 1e-300)
    trace, converged, sweep = [], False, 0
    for sweep in range(1, max_iterations + 1):
        delta = 0.0
        for k in range(dataset.K):
            partial = y - (state.f.sum(axis=1) - state.f[:, k])
            h_s, h_t = bandwidths[k]
            beta_k, _ = univariate_smooth(partial, X[:, k], h_s, h_t, engine)
            delta = max(delta, float(np.max(np.abs((beta_k - state.beta[:, k]) * X[:, k]))))
            state.beta[:, k] = beta_k
            trace.append((k, h_s, h_t))
        if delta < tol * scale:
            converged = True
            break
    return state.beta, converged, sweep, trace
