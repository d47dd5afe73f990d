"""Spatial, temporal and combined spatio-temporal kernel weights.

Two layers live here. The scalar/vector functions (``spatial_weight``,
``temporal_weight``, ``st_weights`` ...) evaluate weights for a single focal
point and are the reference definitions. :class:`WeightEngine` builds whole
focal-by-observation weight matrices for a fixed point set and caches them per
bandwidth, which is what the calibration loop needs.

Bandwidth conventions
---------------------
A bandwidth is a distance (non-adaptive) or a nearest-neighbour count
(adaptive). ``GLOBAL`` (``math.inf``) is the OLS-limit sentinel: the kernel
short-circuits to uniform weights.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DegenerateNeighborhoodError, InvalidInputError

GLOBAL = math.inf

FAMILIES = ("gaussian", "bisquare")
SYMMETRIES = ("symmetric", "forward")
COMBINES = ("multiplicative", "additive")


@dataclass(frozen=True)
class KernelSpec:
    """Full kernel configuration shared by estimation and prediction.

    ``temporal_family=None`` switches the temporal component off entirely
    (purely spatial GWR/MGWR).
    """

    spatial_family: str = "gaussian"
    spatial_adaptive: bool = True
    temporal_family: Optional[str] = "gaussian"
    temporal_adaptive: bool = False
    cyclic: bool = False
    cycle_length: Optional[float] = None
    symmetry: str = "symmetric"
    combine: str = "multiplicative"
    max_neighbors: Optional[int] = None

    def __post_init__(self):
        if self.spatial_family not in FAMILIES:
            raise InvalidInputError(f"unknown spatial kernel {self.spatial_family!r}")
        if self.temporal_family is not None and self.temporal_family not in FAMILIES:
            raise InvalidInputError(f"unknown temporal kernel {self.temporal_family!r}")
        if self.symmetry not in SYMMETRIES:
            raise InvalidInputError(f"unknown symmetry {self.symmetry!r}")
        if self.combine not in COMBINES:
            raise InvalidInputError(f"unknown combination operator {self.combine!r}")
        if self.cyclic:
            if self.cycle_length is None or not np.isfinite(self.cycle_length) or self.cycle_length <= 0:
                raise InvalidInputError("cyclic kernels need a positive cycle_length")
            if self.symmetry == "forward":
                raise InvalidInputError("forward symmetry cannot be combined with a cyclic kernel")
        if self.max_neighbors is not None and self.max_neighbors < 2:
            raise InvalidInputError("max_neighbors must be at least 2")

    @property
    def has_time(self) -> bool:
        return self.temporal_family is not None

    def spatial_only(self) -> "KernelSpec":
        d = asdict(self)
        d.update(temporal_family=None, cyclic=False, cycle_length=None, symmetry="symmetric")
        return KernelSpec(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(**d)


# -- reference (single focal point) functions ---------------------------------


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(np.asarray(v, dtype=float))):
            raise InvalidInputError("non-finite distance or bandwidth")


def kernel_profile(z, family: str):
    """Kernel value as a function of the scaled distance ``z = d / h >= 0``."""
    z = np.asarray(z, dtype=float)
    if family == "gaussian":
        return np.exp(-0.5 * z * z)
    if family == "bisquare":
        return np.where(z < 1.0, (1.0 - z * z) ** 2, 0.0)
    raise InvalidInputError(f"unknown kernel family {family!r}")


def spatial_weight(d, h, family: str = "gaussian"):
    """Spatial kernel weight for distance ``d`` at distance-bandwidth ``h``.

    Gaussian: ``exp(-(d/h)^2 / 2)``; bisquare: ``(1 - (d/h)^2)^2`` inside the
    support, 0 outside. ``h = GLOBAL`` gives weight 1.
    """
    d = np.asarray(d, dtype=float)
    if np.any(np.isnan(d)) or np.any(np.isinf(d)) or np.isnan(h):
        raise InvalidInputError("non-finite distance or bandwidth")
    if np.any(d < 0):
        raise InvalidInputError("distances must be non-negative")
    if h <= 0:
        raise InvalidInputError("bandwidth must be positive")
    if math.isinf(h):
        out = np.ones_like(d)
    else:
        out = kernel_profile(d / h, family)
    return float(out) if out.ndim == 0 else out


def adaptive_to_distance(focal, coords, k: int) -> float:
    """Distance from ``focal`` to its ``k``-th nearest point in ``coords``.

    A focal point that is itself in ``coords`` counts as its own first
    neighbour (distance 0).
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    n = coords.shape[0]
    k = int(k)
    if k < 1 or k > n:
        raise InvalidInputError(f"neighbour count {k} outside [1, {n}]")
    d = np.sqrt(((coords - np.asarray(focal, dtype=float)) ** 2).sum(axis=1))
    return float(np.partition(d, k - 1)[k - 1])


def cyclic_distance(t_i, t_j, C: float):
    """Distance between positions on a cycle of length ``C``; lies in ``[0, C/2]``."""
    _check_finite(t_i, t_j, C)
    if C <= 0:
        raise InvalidInputError("cycle length must be positive")
    r = np.mod(np.abs(np.asarray(t_i, dtype=float) - np.asarray(t_j, dtype=float)), C)
    out = np.minimum(r, C - r)
    return float(out) if np.ndim(out) == 0 else out


def temporal_distance(t_i, t_j, spec: KernelSpec):
    if spec.cyclic:
        return cyclic_distance(t_i, t_j, spec.cycle_length)
    out = np.abs(np.asarray(t_i, dtype=float) - np.asarray(t_j, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def temporal_weight(t_i, t_j, h_t, spec: KernelSpec):
    """Temporal weight of an observation at ``t_j`` for a focal point at ``t_i``.

    Forward kernels return 0 for observations strictly after the focal time.
    """
    if h_t <= 0:
        raise InvalidInputError("temporal bandwidth must be positive")
    family = spec.temporal_family or "gaussian"
    d = temporal_distance(t_i, t_j, spec)
    w = np.ones_like(np.asarray(d, dtype=float)) if math.isinf(h_t) else kernel_profile(np.asarray(d) / h_t, family)
    if spec.symmetry == "forward":
        w = np.where(np.asarray(t_j, dtype=float) > np.asarray(t_i, dtype=float), 0.0, w)
    return float(w) if np.ndim(w) == 0 else w


def combine_weights(w_s, w_t, how: str):
    """Multiplicative: ``w_s * w_t``. Additive: ``(w_s + w_t) / 2`` (kept in [0, 1])."""
    if how == "multiplicative":
        return w_s * w_t
    if how == "additive":
        return 0.5 * (w_s + w_t)
    raise InvalidInputError(f"unknown combination operator {how!r}")


def st_weights(focal_point, focal_time, coords, times, h_s, h_t, spec: KernelSpec, focal_index=None):
    """Weight vector of every observation for one focal point.

    Adaptive bandwidths (neighbour counts) are resolved to distances for this
    focal point first. Weights are not normalised.
    """
    coords = np.asarray(coords, dtype=float)
    times = np.asarray(times, dtype=float)
    n = coords.shape[0]
    d = np.sqrt(((coords - np.asarray(focal_point, dtype=float)) ** 2).sum(axis=1))
    if math.isinf(h_s):
        w = np.ones(n)
    else:
        hs = adaptive_to_distance(focal_point, coords, h_s) if spec.spatial_adaptive else h_s
        w = kernel_profile(d / max(hs, _TINY), spec.spatial_family)
    if spec.has_time:
        if math.isinf(h_t) or not spec.temporal_adaptive:
            ht = h_t
        else:
            k = int(h_t)
            if k > n:
                raise InvalidInputError(f"neighbour count {k} exceeds n={n}")
            td = temporal_distance(focal_time, times, spec)
            ht = max(float(np.partition(td, k - 1)[k - 1]), _TINY)
        w = combine_weights(w, temporal_weight(focal_time, times, ht, spec), spec.combine)
    if spec.max_neighbors is not None and spec.max_neighbors < n:
        thr = np.partition(w, n - spec.max_neighbors)[n - spec.max_neighbors]
        w = np.where(w >= thr, w, 0.0)
    if not np.any(w > 0):
        raise DegenerateNeighborhoodError(focal_index)
    return w


_TINY = 1e-12


# -- matrix engine --------------------------------------------------------------


class WeightEngine:
    """Focal-by-observation weight matrices with per-bandwidth caching.

    Parameters
    ----------
    coords, times : ndarray
        Observation locations (n x 2) and timestamps (n,).
    spec : KernelSpec
    focal_coords, focal_times : ndarray, optional
        Focal points; defaults to the observations themselves, in which case
        each observation counts as its own nearest neighbour.
    cache_size : int
        Number of spatial and temporal matrices kept in memory.

    A return value of ``None`` from :meth:`spatial`, :meth:`temporal` or
    :meth:`weights` stands for a matrix of ones.
    """

    def __init__(self, coords, times, spec: KernelSpec, focal_coords=None, focal_times=None, cache_size=8):
        self.spec = spec
        self.coords = np.asarray(coords, dtype=float)
        self.times = np.asarray(times, dtype=float)
        self.n = self.coords.shape[0]
        self.in_sample = focal_coords is None
        fc = self.coords if focal_coords is None else np.atleast_2d(np.asarray(focal_coords, dtype=float))
        ft = self.times if focal_times is None else np.atleast_1d(np.asarray(focal_times, dtype=float))
        self.focal_coords, self.focal_times = fc, ft
        self.m = fc.shape[0]
        self.cache_size = cache_size
        self._dist = cdist(fc, self.coords)
        self._dist_sorted = None
        self._tdist = None
        self._tdist_sorted = None
        self._future = None
        self._s_cache: OrderedDict = OrderedDict()
        self._t_cache: OrderedDict = OrderedDict()
        self._lock = threading.RLock()

    # distances are built lazily; the spatial one is always needed
    @property
    def distances(self):
        return self._dist

    @property
    def sorted_distances(self):
        if self._dist_sorted is None:
            self._dist_sorted = np.sort(self._dist, axis=1)
        return self._dist_sorted

    @property
    def time_distances(self):
        if self._tdist is None:
            diff = self.focal_times[:, None] - self.times[None, :]
            if self.spec.cyclic:
                C = self.spec.cycle_length
                r = np.mod(np.abs(diff), C)
                self._tdist = np.minimum(r, C - r)
            else:
                self._tdist = np.abs(diff)
        return self._tdist

    @property
    def sorted_time_distances(self):
        if self._tdist_sorted is None:
            self._tdist_sorted = np.sort(self.time_distances, axis=1)
        return self._tdist_sorted

    @property
    def future_mask(self):
        """True where the observation lies strictly after the focal time."""
        if self._future is None:
            self._future = self.times[None, :] > self.focal_times[:, None]
        return self._future

    def _row_bandwidths(self, h, adaptive, sorted_d):
        if not adaptive:
            if h <= 0:
                raise InvalidInputError("bandwidth must be positive")
            return h
        k = int(round(h))
        if k < 1 or k > self.n:
            raise InvalidInputError(f"neighbour count {k} outside [1, {self.n}]")
        return np.maximum(sorted_d[:, k - 1], _TINY)[:, None]

    @staticmethod
    def _evaluate(d, hrow, family):
        z = d / hrow
        if family == "gaussian":
            z *= z
            z *= -0.5
            np.exp(z, out=z)
            return z
        out = np.where(z < 1.0, 1.0 - z * z, 0.0)
        out *= out
        return out

    def _cached(self, cache, key, build):
        with self._lock:
            if key in cache:
                cache.move_to_end(key)
                return cache[key]
            val = build()
            cache[key] = val
            if len(cache) > self.cache_size:
                cache.popitem(last=False)
            return val

    def spatial(self, h):
        if math.isinf(h):
            return None

        def build():
            hrow = self._row_bandwidths(
                h, self.spec.spatial_adaptive, self.sorted_distances if self.spec.spatial_adaptive else None
            )
            return self._evaluate(self._dist, hrow, self.spec.spatial_family)

        return self._cached(self._s_cache, float(h), build)

    def temporal(self, h):
        spec = self.spec
        if not spec.has_time:
            return None
        if math.isinf(h):
            if spec.symmetry == "forward":
                return self._cached(self._t_cache, math.inf, lambda: (~self.future_mask).astype(float))
            return None

        def build():
            hrow = self._row_bandwidths(
                h, spec.temporal_adaptive, self.sorted_time_distances if spec.temporal_adaptive else None
            )
            w = self._evaluate(self.time_distances, hrow, spec.temporal_family)
            if spec.symmetry == "forward":
                w[self.future_mask] = 0.0
            return w

        return self._cached(self._t_cache, float(h), build)

    def weights(self, h_s, h_t=GLOBAL):
        """Combined weight matrix (m x n) or ``None`` for uniform weights."""
        ks = self.spatial(h_s)
        kt = self.temporal(h_t) if self.spec.has_time else None
        if not self.spec.has_time or self.spec.combine == "multiplicative":
            if ks is None:
                w = kt
            elif kt is None:
                w = ks
            else:
                w = ks * kt
        else:
            if ks is None and kt is None:
                w = None
            else:
                w = 0.5 * ((1.0 if ks is None else ks) + (1.0 if kt is None else kt))
        cap = self.spec.max_neighbors
        if cap is not None and cap < self.n:
            w = np.ones((self.m, self.n)) if w is None else w.copy()
            thr = np.partition(w, self.n - cap, axis=1)[:, self.n - cap]
            w[w < thr[:, None]] = 0.0
        return w

    def weighted_sums(self, W, V):
        """``W @ V`` honouring the ``None`` (all ones) convention."""
        V = np.asarray(V, dtype=float)
        if W is None:
            s = V.sum(axis=0)
            return np.broadcast_to(s, (self.m,) + s.shape).copy()
        return W @ V

    def self_weights(self, W):
        """Diagonal of an in-sample weight matrix."""
        if not self.in_sample:
            raise InvalidInputError("self weights exist only for in-sample focal points")
        if W is None:
            return np.ones(self.n)
        return np.diagonal(W).copy()
