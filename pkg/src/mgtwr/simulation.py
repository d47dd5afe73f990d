"""Simulated spatio-temporal varying-coefficient data and the benchmark harness.

Data-generating process
-----------------------
``Y = b1(u,v,t) + b2(u,v,t) X1 + b3(u,v) X2 + b4(u,v) X3 + eps`` on the unit
square, with day-of-year ``t`` in 1..365 and a year index. ``b1`` blends two
planar surfaces according to the distance of ``t`` to mid-year; ``b2`` is an
interior bump over time-perturbed coordinates. Patterns repeat identically
every year. ``b3`` (a coarse gradient) and ``b4`` (a fine oscillation) are
purely spatial surfaces chosen for this package.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset, ols
from .errors import InvalidInputError, MGTWRError
from .kernels import KernelSpec
from .local_regression import gtwr_predict, select_gtwr
from .tds import TdsConfig, backfit, build_grid

DAYS = 365
COEF_NAMES = ("beta1", "beta2", "beta3", "beta4")
# variance_ratio: Var(eta) / Var(eps) = snr
# explained_share: Var(eta) / (Var(eta) + Var(eps)) = snr
SNR_DEFINITIONS = ("variance_ratio", "explained_share")


@dataclass
class DgpConfig:
    n: int = 1000
    snr: float = 0.9
    years: int = 4
    seed: int = 0
    holdout_fraction: float = 0.2
    snr_definition: str = "variance_ratio"

    def __post_init__(self):
        if self.snr_definition not in SNR_DEFINITIONS:
            raise InvalidInputError(f"unknown snr_definition {self.snr_definition!r}")
        if self.snr_definition == "explained_share" and not self.snr < 1:
            raise InvalidInputError("an explained-share snr must lie in (0, 1)")
        if self.n <= 50:
            raise InvalidInputError("n must exceed 50")
        if not self.snr > 0:
            raise InvalidInputError("snr must be positive")
        if not 0 < self.holdout_fraction < 1:
            raise InvalidInputError("holdout_fraction must lie in (0, 1)")
        if self.years < 1:
            raise InvalidInputError("years must be at least 1")


@dataclass
class SimulatedDataset:
    dataset: Dataset
    beta: np.ndarray
    eta: np.ndarray
    doy: np.ndarray
    year: np.ndarray
    train: np.ndarray
    test: np.ndarray
    sigma2: float

    @property
    def realized_snr(self) -> float:
        eps = self.dataset.y - self.eta
        return float(self.eta.var() / eps.var())


def time_proxy(t):
    """Normalised distance to mid-year, in [0, 1]."""
    return np.abs(np.asarray(t, dtype=float) - 182.5) / 182.5


def beta1_raw(u, v, t):
    """Season-rotating blend of two planar surfaces (before the non-negativity shift)."""
    d = time_proxy(t)
    return (1.0 - d) * (3.0 * (u + v) - 1.0) + d * (3.0 * (-u + v))


def corrected_coords(u, v, t):
    """Time-perturbed spatial proxies, rescaled over the sample to [0, 1]."""
    a = np.abs(np.asarray(t, dtype=float) - 210.0) / 210.0
    uu = u + a
    vv = v + a
    u_cor = uu / uu.max()
    v_cor = (vv - vv.min()) / (vv.max() - vv.min())
    return u_cor, v_cor


def bump(u_cor, v_cor):
    """Interior bump peaking at 5.25 at (1/2, 1/2)."""
    return 84.0 * u_cor * v_cor * (1.0 - u_cor) * (1.0 - v_cor)


def beta3_surface(u, v):
    return 1.0 + 2.0 * u + 2.0 * v


def beta4_surface(u, v):
    return 4.0 * np.sin(2.0 * np.pi * u) * np.cos(2.0 * np.pi * v)


def true_coefficients(u, v, t):
    """Ground-truth coefficient matrix (n x 4) for a sample."""
    b1 = beta1_raw(u, v, t)
    b1 = b1 - b1.min()
    b2 = bump(*corrected_coords(u, v, t))
    return np.column_stack([b1, b2, beta3_surface(u, v), beta4_surface(u, v)])


def noise_variance(var_eta: float, snr: float, definition: str = "variance_ratio") -> float:
    if definition == "variance_ratio":
        return var_eta / snr
    return var_eta * (1.0 - snr) / snr


def gen_dataset(config: DgpConfig) -> SimulatedDataset:
    """Draw one replication: data, ground truth and a random train/holdout split."""
    rng = np.random.default_rng(config.seed)
    n = config.n
    u = rng.uniform(0.0, 1.0, n)
    v = rng.uniform(0.0, 1.0, n)
    doy = rng.integers(1, DAYS + 1, n)
    year = rng.integers(1, config.years + 1, n)
    Xc = rng.standard_normal((n, 3))
    beta = true_coefficients(u, v, doy)
    eta = beta[:, 0] + (Xc * beta[:, 1:]).sum(axis=1)
    sigma2 = noise_variance(float(eta.var()), config.snr, config.snr_definition)
    # rescale the draw so the realised noise variance is exactly sigma2
    z = rng.standard_normal(n)
    y = eta + z * math.sqrt(sigma2) / z.std()
    times = (year - 1) * DAYS + doy
    X = np.column_stack([np.ones(n), Xc])
    ds = Dataset(np.column_stack([u, v]), times, X, y, names=["Intercept", "X1", "X2", "X3"], year=year)
    n_test = int(round(config.holdout_fraction * n))
    perm = rng.permutation(n)
    test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return SimulatedDataset(ds, beta, eta, doy.astype(float), year, train, test, sigma2)


# -- benchmark -----------------------------------------------------------------------

ESTIMATORS = ("OLS", "GWR", "GTWR", "GTWR_cyclic", "MGWR_tds", "MGTWR_tds", "MGTWR_tds_cyclic")
SPATIAL_ONLY = KernelSpec(temporal_family=None)
LINEAR_TIME = KernelSpec()
CYCLIC_TIME = KernelSpec(cyclic=True, cycle_length=DAYS)


def estimator_spec(name: str) -> KernelSpec:
    """Kernel used by each benchmark estimator (adaptive Gaussian in space, Gaussian in days)."""
    if name in ("OLS", "GWR", "MGWR_tds"):
        return SPATIAL_ONLY
    if name.endswith("cyclic"):
        return CYCLIC_TIME
    return LINEAR_TIME


def replication_seed(master_seed: int, rep: int) -> int:
    """Independent per-replication seed derived from ``(master_seed, rep)``."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(rep),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class BenchmarkConfig:
    dgp: DgpConfig = field(default_factory=DgpConfig)
    estimators: Sequence[str] = ESTIMATORS
    replications: int = 50
    seed: int = 0
    workers: int = 1
    tds: TdsConfig = field(default_factory=TdsConfig)
    M: int = 20
    gamma: float = 8.0
    tune_gamma: bool = False

    def __post_init__(self):
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise InvalidInputError(f"unknown estimator(s): {', '.join(bad)}")
        if self.replications < 1:
            raise InvalidInputError("replications must be positive")

    def to_dict(self):
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        return d


def _coef_rmse(beta_hat, beta_true):
    return np.sqrt(np.mean((beta_hat - beta_true) ** 2, axis=0))


def _fit_one(name: str, train: Dataset, test: Dataset, cfg: BenchmarkConfig):
    """Fit one estimator; returns (beta on training points, out-of-sample predictions, info)."""
    from .prediction import PredictionModel, cv_gamma, predict

    spec = estimator_spec(name)
    info = {}
    if name == "OLS":
        b = ols(train.X, train.y)
        return np.tile(b, (train.n, 1)), test.X @ b, info
    if name in ("GWR", "GTWR", "GTWR_cyclic"):
        grid = build_grid(train, cfg.M, spec)
        fit, _ = select_gtwr(train, spec, grid)
        yhat, _ = gtwr_predict(train, fit.h_s, fit.h_t, spec, test.coords, test.times, test.X)
        info.update(h_s=fit.h_s, h_t=fit.h_t, aicc=fit.aicc)
        return fit.beta, yhat, info
    fit = backfit(train, spec, cfg.tds)
    model = PredictionModel.from_fit(fit, train, cfg.gamma)
    if cfg.tune_gamma:
        model.gamma = cv_gamma(model, train, seed=cfg.tds.seed)
    yhat = predict(model, test.X, test.coords, test.times)
    info.update(indices=fit.indices.tolist(), converged=fit.converged, sweeps=fit.n_sweeps, gamma=model.gamma)
    return fit.beta, yhat, info


def run_replication(cfg: BenchmarkConfig, rep: int) -> List[dict]:
    """All estimators on one seeded replication; one record per estimator."""
    dgp = DgpConfig(**{**asdict(cfg.dgp), "seed": replication_seed(cfg.seed, rep)})
    sim = gen_dataset(dgp)
    train, test = sim.dataset.subset(sim.train), sim.dataset.subset(sim.test)
    beta_true = sim.beta[sim.train]
    records = []
    for name in cfg.estimators:
        rec = {"replication": rep, "seed": dgp.seed, "estimator": name, "failed": False, "error": ""}
        t0 = time.perf_counter()
        try:
            beta_hat, yhat, info = _fit_one(name, train, test, cfg)
        except MGTWRError as exc:
            rec.update(failed=True, error=f"{type(exc).__name__}: {exc}")
            records.append(rec)
            continue
        r = _coef_rmse(beta_hat, beta_true)
        rec.update({c: float(v) for c, v in zip(COEF_NAMES, r)})
        rec["mean_rmse"] = float(r.mean())
        rec["oos_rmse"] = float(np.sqrt(np.mean((test.y - yhat) ** 2)))
        rec["seconds"] = time.perf_counter() - t0
        rec["info"] = info
        records.append(rec)
    return records


@dataclass
class BenchmarkReport:
    config: BenchmarkConfig
    records: List[dict]

    METRICS = COEF_NAMES + ("mean_rmse", "oos_rmse")

    def summary(self) -> List[dict]:
        """Mean and standard deviation across replications, per estimator."""
        rows = []
        for name in self.config.estimators:
            recs = [r for r in self.records if r["estimator"] == name]
            ok = [r for r in recs if not r["failed"]]
            row = {"estimator": name, "replications": len(ok), "failures": len(recs) - len(ok)}
            for m in self.METRICS:
                vals = np.array([r[m] for r in ok], dtype=float)
                row[m] = float(vals.mean()) if vals.size else math.nan
                row[m + "_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else math.nan
            rows.append(row)
        return rows

    def mean(self, estimator: str, metric: str) -> float:
        for row in self.summary():
            if row["estimator"] == estimator:
                return row[metric]
        raise KeyError(estimator)

    def format_table(self) -> str:
        """Human-readable table: RMSE per coefficient, mean RMSE and out-of-sample RMSE."""
        head = f"{'Estimator':<18}" + "".join(f"{h:>10}" for h in ("beta1", "beta2", "beta3", "beta4", "mean", "oos_Y"))
        lines = [head, "-" * len(head)]
        for row in self.summary():
            vals = [row[m] for m in self.METRICS]
            lines.append(f"{row['estimator']:<18}" + "".join(f"{v:>10.3f}" for v in vals)
                         + (f"  ({row['failures']} failed)" if row["failures"] else ""))
        return "\n".join(lines)


def run_benchmark(config: BenchmarkConfig) -> BenchmarkReport:
    """Monte Carlo comparison of the kernel-model family on simulated data.

    Replications are independent; with ``workers > 1`` they run in separate
    processes. Records come back in replication order whatever the worker count.
    """
    reps = range(config.replications)
    if config.workers > 1 and config.replications > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            chunks = list(ex.map(run_replication, [config] * config.replications, reps))
    else:
        chunks = [run_replication(config, r) for r in reps]
    return BenchmarkReport(config, [rec for chunk in chunks for rec in chunk])
