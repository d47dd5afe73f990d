"""Multiscale geographically and temporally weighted regression (MGTWR).

Calibration descends per-covariate spatial and temporal bandwidth grids from
the OLS limit (Top-Down Scale backfitting). The package also provides
sharpened-kernel prediction, hat-matrix inference and a simulation harness.
"""

__version__ = "0.1.0"

from .data import Dataset, ols
from .errors import (
    DegenerateNeighborhoodError,
    InferenceDisabledError,
    InferenceInfeasibleError,
    InvalidInputError,
    LocalCollinearityError,
    MGTWRError,
    SchemaError,
    SingularFitError,
    StuckCovariateError,
)
from .inference import InferenceResult, accumulate_hat, exact_se, fdr_adjust, infer, local_approx_se
from .kernels import GLOBAL, KernelSpec, WeightEngine, st_weights
from .local_regression import aicc, gtwr_fit, gtwr_predict, select_gtwr
from .prediction import PredictionModel, cv_gamma, extrapolate, predict, sharpen
from .tds import BandwidthGrid, FitResult, TdsConfig, backfit, backfit_fixed, build_grid

__all__ = [
    "__version__",
    "Dataset",
    "ols",
    "GLOBAL",
    "KernelSpec",
    "WeightEngine",
    "st_weights",
    "aicc",
    "gtwr_fit",
    "gtwr_predict",
    "select_gtwr",
    "BandwidthGrid",
    "TdsConfig",
    "FitResult",
    "build_grid",
    "backfit",
    "backfit_fixed",
    "PredictionModel",
    "sharpen",
    "extrapolate",
    "predict",
    "cv_gamma",
    "InferenceResult",
    "accumulate_hat",
    "exact_se",
    "local_approx_se",
    "fdr_adjust",
    "infer",
    "MGTWRError",
    "InvalidInputError",
    "SchemaError",
    "DegenerateNeighborhoodError",
    "SingularFitError",
    "LocalCollinearityError",
    "StuckCovariateError",
    "InferenceDisabledError",
    "InferenceInfeasibleError",
]
