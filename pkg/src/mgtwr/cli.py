"""Command-line interface: ``mgtwr {fit,predict,simulate,benchmark,infer}``.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then command-line flags. Every CSV written gets a
``<name>.meta.json`` sidecar with the config hash, library version and seed.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 non-convergence
(artifacts are still written).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from . import __version__
from .archive import dumps_json, load_model, save_model
from .data import Dataset, rowdot
from .errors import InvalidInputError, MGTWRError, SchemaError
from .inference import INFERENCE_CAP, infer
from .kernels import KernelSpec
from .prediction import DEFAULT_GAMMA, PredictionModel, cv_gamma, extrapolate
from .simulation import ESTIMATORS, BenchmarkConfig, DgpConfig, gen_dataset, run_benchmark
from .tds import BandwidthGrid, FitResult, TdsConfig, backfit

log = logging.getLogger("mgtwr")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_NONCONVERGED = 0, 2, 3, 4


@dataclass
class RunConfig:
    # paths
    data: Optional[str] = None
    model: Optional[str] = None
    out_dir: str = "."
    # column mapping
    u: str = "u"
    v: str = "v"
    t: str = "t"
    y: str = "y"
    covariates: Optional[List[str]] = None
    # kernel
    spatial_family: str = "gaussian"
    spatial_adaptive: bool = True
    temporal_family: str = "gaussian"
    temporal_adaptive: bool = False
    cyclic: Optional[float] = None
    symmetry: str = "symmetric"
    combine: str = "multiplicative"
    max_neighbors: Optional[int] = None
    # calibration
    M: int = 20
    order_strategy: str = "importance"
    delta_rmse_tol: float = 1e-5
    patience: int = 2
    max_iterations: int = 200
    seed: int = 0
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    # prediction and inference
    gamma: Optional[float] = None  # None: 8 when fitting, the archived value when predicting
    cv_gamma: bool = False
    inference: bool = False
    inference_method: str = "exact"
    inference_cap: int = INFERENCE_CAP
    reference: str = "normal"
    # simulation and benchmark
    n: int = 1000
    snr: float = 0.9
    snr_definition: str = "variance_ratio"
    years: int = 4
    holdout_fraction: float = 0.2
    replications: int = 50
    estimators: List[str] = field(default_factory=lambda: list(ESTIMATORS))
    tune_gamma: bool = False

    _PATHS = ("data", "model", "out_dir")
    _RUNTIME = ("workers",)

    def kernel_spec(self) -> KernelSpec:
        tf = None if str(self.temporal_family).lower() == "none" else self.temporal_family
        return KernelSpec(
            spatial_family=self.spatial_family,
            spatial_adaptive=self.spatial_adaptive,
            temporal_family=tf,
            temporal_adaptive=self.temporal_adaptive,
            cyclic=self.cyclic is not None and tf is not None,
            cycle_length=self.cyclic if tf is not None else None,
            symmetry=self.symmetry,
            combine=self.combine,
            max_neighbors=self.max_neighbors,
        )

    def tds_config(self) -> TdsConfig:
        return TdsConfig(self.M, self.order_strategy, self.delta_rmse_tol, self.patience, self.max_iterations,
                         self.seed, max(1, int(self.workers)))

    def dgp_config(self) -> DgpConfig:
        return DgpConfig(self.n, self.snr, self.years, self.seed, self.holdout_fraction, self.snr_definition)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def config_hash(self) -> str:
        """Hash of the modelling settings (paths and worker count excluded)."""
        d = {k: v for k, v in self.to_dict().items() if k not in self._PATHS + self._RUNTIME}
        return hashlib.sha256(dumps_json(d).encode("utf-8")).hexdigest()


_FIELD_NAMES = {f.name for f in dataclasses.fields(RunConfig)}


def load_config(path, overrides: dict) -> RunConfig:
    data = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidInputError("config file must hold a JSON object")
        unknown = sorted(set(data) - _FIELD_NAMES)
        if unknown:
            raise InvalidInputError(f"unknown config key(s): {', '.join(unknown)}")
    data.update(overrides)
    return RunConfig(**data)


# -- I/O helpers ---------------------------------------------------------------------


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(df: pd.DataFrame, path: Path, cfg: RunConfig, command: str, inputs=()):
    """CSV with a header row, full-precision floats and a metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    write_json(
        {
            "command": command,
            "config_hash": cfg.config_hash(),
            "library_version": __version__,
            "seed": cfg.seed,
            "inputs": {Path(p).name: _file_sha256(p) for p in inputs if p},
        },
        path.with_name(path.name + ".meta.json"),
    )


def write_json(obj, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(obj) + "\n", encoding="utf-8")


def read_table(path) -> pd.DataFrame:
    if not path:
        raise InvalidInputError("no input data given (use --data)")
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc


def _column(df: pd.DataFrame, name: str, path) -> np.ndarray:
    if name not in df.columns:
        raise SchemaError(f"{path}: missing column {name!r}")
    col = pd.to_numeric(df[name], errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(col)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise InvalidInputError(f"{path}: non-finite or non-numeric value in column {name!r} at row {row}")
    return col


def covariate_columns(df: pd.DataFrame, cfg: RunConfig) -> List[str]:
    if cfg.covariates is not None:
        return list(cfg.covariates)
    skip = {cfg.u, cfg.v, cfg.t, cfg.y}
    return [c for c in df.columns if c not in skip]


def frame_arrays(df: pd.DataFrame, cfg: RunConfig, covariates, path):
    """Coordinates, times and design matrix (intercept first), mapped by column name."""
    coords = np.column_stack([_column(df, cfg.u, path), _column(df, cfg.v, path)])
    times = _column(df, cfg.t, path)
    Xc = [_column(df, c, path) for c in covariates]
    return coords, times, np.column_stack([np.ones(len(df))] + Xc)


def dataset_from_frame(df: pd.DataFrame, cfg: RunConfig, covariates, path) -> Dataset:
    coords, times, X = frame_arrays(df, cfg, covariates, path)
    return Dataset(coords, times, X, _column(df, cfg.y, path), names=["Intercept"] + list(covariates))


# -- commands --------------------------------------------------------------------------


def cmd_fit(cfg: RunConfig) -> int:
    df = read_table(cfg.data)
    covs = covariate_columns(df, cfg)
    ds = dataset_from_frame(df, cfg, covs, cfg.data)
    spec = cfg.kernel_spec()
    fit = backfit(ds, spec, cfg.tds_config())
    model = PredictionModel.from_fit(fit, ds, DEFAULT_GAMMA if cfg.gamma is None else cfg.gamma)
    if cfg.cv_gamma:
        model.gamma = cv_gamma(model, ds, seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = {"u": cfg.u, "v": cfg.v, "t": cfg.t, "y": cfg.y, "covariates": covs}
    fit_meta = {
        "grid": fit.grid.to_dict(),
        "indices": fit.indices.tolist(),
        "trace": [list(map(int, r)) for r in fit.trace],
        "converged": fit.converged,
        "n_sweeps": fit.n_sweeps,
        "n": ds.n,
        "config_hash": cfg.config_hash(),
    }
    save_model(out / "model.zip", model, {"columns": columns, "fit": fit_meta})

    bw = pd.DataFrame(fit.bandwidth_table())
    write_csv(bw, out / "bandwidths.csv", cfg, "fit", [cfg.data])
    coef = pd.DataFrame({"u": ds.coords[:, 0], "v": ds.coords[:, 1], "t": ds.times})
    for k, name in enumerate(ds.covariate_names):
        coef[f"beta_{name}"] = fit.beta[:, k]
    coef["fitted"] = fit.fitted
    coef["residual"] = fit.residuals
    write_csv(coef, out / "coefficients.csv", cfg, "fit", [cfg.data])
    logdf = pd.DataFrame(
        [
            {
                "sweep": r["sweep"],
                "covariate": ds.covariate_names[r["covariate"]],
                "old_i_s": r["old"][0],
                "old_i_t": r["old"][1],
                "new_i_s": r["new"][0],
                "new_i_t": r["new"][1],
                "moved": r["moved"],
                "aicc": r["aicc"],
                "rmse": r["rmse"],
            }
            for r in fit.log
        ],
        columns=["sweep", "covariate", "old_i_s", "old_i_t", "new_i_s", "new_i_t", "moved", "aicc", "rmse"],
    )
    write_csv(logdf, out / "iteration_log.csv", cfg, "fit", [cfg.data])

    summary = {
        "n": ds.n,
        "K": ds.K,
        "covariates": ds.covariate_names,
        "rmse": fit.rmse,
        "converged": fit.converged,
        "sweeps": fit.n_sweeps,
        "rmse_history": fit.rmse_history,
        "kernel": spec.to_dict(),
        "tds": {k: v for k, v in cfg.tds_config().to_dict().items() if k != "workers"},
        "gamma": model.gamma,
        "warnings": fit.warnings,
        "config_hash": cfg.config_hash(),
        "library_version": __version__,
    }
    if cfg.inference:
        res = infer(fit, ds, cfg.inference_method, reference=cfg.reference, cap=cfg.inference_cap)
        summary.update(trS=res.trS, aicc=res.aicc, sigma2_hat=res.sigma2_hat, inference_method=res.method)
        write_csv(pd.DataFrame(res.significance_table()), out / "significance.csv", cfg, "fit", [cfg.data])
    write_json(summary, out / "summary.json")
    print(f"fit: n={ds.n} K={ds.K} rmse={fit.rmse:.6g} sweeps={fit.n_sweeps} converged={fit.converged}")
    for row in fit.bandwidth_table():
        print(f"  {row['covariate']:<12} h_s={row['h_s']:<12.6g} h_t={row['h_t'] if row['h_t'] is not None else '-'!s:<12} {row['kind']}")
    if not fit.converged:
        print("fit did not converge within max_iterations; artifacts written", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _model_columns(meta: dict, cfg: RunConfig):
    cols = meta.get("extra", {}).get("columns")
    if not cols:
        raise SchemaError("model archive lacks its column mapping")
    return dataclasses.replace(cfg, u=cols["u"], v=cols["v"], t=cols["t"], y=cols["y"]), cols["covariates"]


def cmd_predict(cfg: RunConfig) -> int:
    if not cfg.model:
        raise InvalidInputError("no model archive given (use --model)")
    model, meta = load_model(cfg.model)
    mcfg, covs = _model_columns(meta, cfg)
    df = read_table(cfg.data)
    has_y = mcfg.y in df.columns
    coords, times, X = frame_arrays(df, mcfg, covs, cfg.data)
    if cfg.gamma is not None:
        model.gamma = cfg.gamma
    B = extrapolate(model, coords, times)
    yhat = rowdot(X, B)
    out = pd.DataFrame({"yhat": yhat})
    for k, name in enumerate(["Intercept"] + list(covs)):
        out[f"beta_{name}"] = B[:, k]
    path = Path(cfg.out_dir) / "predictions.csv"
    write_csv(out, path, cfg, "predict", [cfg.data, cfg.model])
    if has_y:
        r = _column(df, mcfg.y, cfg.data) - yhat
        metrics = {"rmse": float(np.sqrt(np.mean(r * r))), "mae": float(np.mean(np.abs(r))), "n": int(r.size)}
        write_json(metrics, Path(cfg.out_dir) / "prediction_metrics.json")
        print(f"predict: n={r.size} rmse={metrics['rmse']:.6g} mae={metrics['mae']:.6g}")
    else:
        print(f"predict: n={len(yhat)}")
    for w in sorted(set(model.warnings)):
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    sim = gen_dataset(cfg.dgp_config())
    ds = sim.dataset
    data = pd.DataFrame({"u": ds.coords[:, 0], "v": ds.coords[:, 1], "t": ds.times, "y": ds.y})
    for k, name in enumerate(ds.covariate_names[1:], start=1):
        data[name] = ds.X[:, k]
    split = np.full(ds.n, "train", dtype=object)
    split[sim.test] = "test"
    truth = pd.DataFrame({"doy": sim.doy.astype(int), "year": sim.year, "split": split, "eta": sim.eta})
    for k in range(sim.beta.shape[1]):
        truth[f"beta{k + 1}"] = sim.beta[:, k]
    out = Path(cfg.out_dir)
    write_csv(data, out / "simulated.csv", cfg, "simulate")
    write_csv(data.iloc[sim.train], out / "simulated_train.csv", cfg, "simulate")
    write_csv(data.iloc[sim.test], out / "simulated_test.csv", cfg, "simulate")
    write_csv(truth, out / "truth.csv", cfg, "simulate")
    print(f"simulate: n={ds.n} sigma2={sim.sigma2:.6g} realized Var(eta)/Var(eps)={sim.realized_snr:.4g}")
    return EXIT_OK


def cmd_benchmark(cfg: RunConfig) -> int:
    bcfg = BenchmarkConfig(
        dgp=cfg.dgp_config(),
        estimators=list(cfg.estimators),
        replications=cfg.replications,
        seed=cfg.seed,
        workers=max(1, int(cfg.workers)),
        tds=dataclasses.replace(cfg.tds_config(), workers=1),
        M=cfg.M,
        gamma=DEFAULT_GAMMA if cfg.gamma is None else cfg.gamma,
        tune_gamma=cfg.tune_gamma,
    )
    report = run_benchmark(bcfg)
    rows = []
    for r in report.records:
        info = r.get("info", {})
        rows.append({
            "replication": r["replication"],
            "seed": r["seed"],
            "estimator": r["estimator"],
            "failed": r["failed"],
            "error": r["error"],
            **{m: r.get(m, np.nan) for m in report.METRICS},
            "converged": info.get("converged", ""),
            "sweeps": info.get("sweeps", ""),
            "gamma": info.get("gamma", ""),
            "indices": json.dumps(info["indices"]) if "indices" in info else "",
        })
    out = Path(cfg.out_dir)
    write_csv(pd.DataFrame(rows), out / "benchmark_records.csv", cfg, "benchmark")
    write_csv(pd.DataFrame(report.summary()), out / "benchmark_summary.csv", cfg, "benchmark")
    table = report.format_table()
    (out / "benchmark_table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def _fit_from_archive(model: PredictionModel, meta: dict, ds: Dataset) -> FitResult:
    fm = meta.get("extra", {}).get("fit")
    if not fm:
        raise SchemaError("model archive lacks the fit trace needed for inference")
    if fm["n"] != ds.n or not np.array_equal(model.coords, ds.coords) or not np.array_equal(model.times, ds.times):
        raise SchemaError("inference needs the exact training data the model was fitted on")
    resid = ds.y - (model.beta * ds.X).sum(axis=1)
    trace = [tuple(r) for r in fm["trace"]]
    return FitResult(model.beta, resid, ds.y, np.array(fm["indices"], dtype=int), BandwidthGrid.from_dict(fm["grid"]),
                     model.spec, ds.covariate_names, fm["converged"], fm["n_sweeps"], [], [], trace, [])


def cmd_infer(cfg: RunConfig) -> int:
    if not cfg.model:
        raise InvalidInputError("no model archive given (use --model)")
    model, meta = load_model(cfg.model)
    mcfg, covs = _model_columns(meta, cfg)
    ds = dataset_from_frame(read_table(cfg.data), mcfg, covs, cfg.data)
    fit = _fit_from_archive(model, meta, ds)
    res = infer(fit, ds, cfg.inference_method, reference=cfg.reference, cap=cfg.inference_cap)
    table = pd.DataFrame(res.significance_table())
    out = Path(cfg.out_dir)
    write_csv(table, out / f"significance_{res.method}.csv", cfg, "infer", [cfg.data, cfg.model])
    se = pd.DataFrame({f"se_{name}": res.se[:, k] for k, name in enumerate(ds.covariate_names)})
    for k, name in enumerate(ds.covariate_names):
        se[f"p_{name}"] = res.p_raw[:, k]
        se[f"p_fdr_{name}"] = res.p_fdr[:, k]
    write_csv(se, out / f"inference_{res.method}.csv", cfg, "infer", [cfg.data, cfg.model])
    print(f"infer ({res.method}): trS={res.trS:.6g} sigma2={res.sigma2_hat:.6g}")
    print(table.to_string(index=False, float_format=lambda x: f"{x:.3f}"))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate, "benchmark": cmd_benchmark,
            "infer": cmd_infer}

def _none_or(conv):
    def parse(s):
        return None if s.lower() == "none" else conv(s)

    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgtwr", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS
    B = argparse.BooleanOptionalAction
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with RunConfig keys")
        p.add_argument("--verbose", "-v", action="store_true")
        g = p.add_argument_group("paths")
        g.add_argument("--data", default=S)
        g.add_argument("--model", default=S)
        g.add_argument("--out-dir", dest="out_dir", default=S)
        g = p.add_argument_group("columns")
        for col in ("u", "v", "t", "y"):
            g.add_argument(f"--{col}-col", dest=col, default=S)
        g.add_argument("--covariates", nargs="+", default=S)
        g = p.add_argument_group("kernel")
        g.add_argument("--spatial-family", dest="spatial_family", choices=["gaussian", "bisquare"], default=S)
        g.add_argument("--spatial-adaptive", dest="spatial_adaptive", action=B, default=S)
        g.add_argument("--temporal-family", dest="temporal_family", choices=["gaussian", "bisquare", "none"],
                       default=S)
        g.add_argument("--temporal-adaptive", dest="temporal_adaptive", action=B, default=S)
        g.add_argument("--cyclic", type=_none_or(float), default=S, metavar="PERIOD")
        g.add_argument("--symmetry", choices=["symmetric", "forward"], default=S)
        g.add_argument("--kernel", dest="combine", choices=["multiplicative", "additive"], default=S)
        g.add_argument("--max-neighbors", dest="max_neighbors", type=_none_or(int), default=S)
        g = p.add_argument_group("calibration")
        g.add_argument("--M", type=int, default=S)
        g.add_argument("--order", dest="order_strategy", choices=["fixed_cyclic", "random", "importance"],
                       default=S)
        g.add_argument("--tol", dest="delta_rmse_tol", type=float, default=S)
        g.add_argument("--patience", type=int, default=S)
        g.add_argument("--max-iterations", dest="max_iterations", type=int, default=S)
        g.add_argument("--seed", type=int, default=S)
        g.add_argument("--workers", type=int, default=S)
        g = p.add_argument_group("prediction and inference")
        g.add_argument("--gamma", type=float, default=S)
        g.add_argument("--cv-gamma", dest="cv_gamma", action=B, default=S)
        g.add_argument("--inference", action=B, default=S)
        g.add_argument("--method", dest="inference_method", choices=["exact", "local_approx"], default=S)
        g.add_argument("--inference-cap", dest="inference_cap", type=int, default=S)
        g.add_argument("--reference", choices=["normal", "t"], default=S)
        g = p.add_argument_group("simulation")
        g.add_argument("--n", type=int, default=S)
        g.add_argument("--snr", type=float, default=S)
        g.add_argument("--snr-definition", dest="snr_definition", choices=["variance_ratio", "explained_share"],
                       default=S)
        g.add_argument("--years", type=int, default=S)
        g.add_argument("--holdout-fraction", dest="holdout_fraction", type=float, default=S)
        g.add_argument("--replications", type=int, default=S)
        g.add_argument("--estimators", nargs="+", choices=list(ESTIMATORS), default=S)
        g.add_argument("--tune-gamma", dest="tune_gamma", action=B, default=S)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except InvalidInputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MGTWRError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, TypeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
