"""Kernel learning with missing responses.

Independence testing, variable selection, kernel ridge regression and
split conformal intervals over mixed covariates (numeric, categorical and
distribution-valued), with the missing-response mechanism handled by
inverse-probability weighting or doubly robust estimation.
"""

from .dataset import (
    Dataset,
    QuantileFunction,
    SplitIndex,
    cgm_to_quantile,
    load_dataset,
    midpoint_grid,
    split,
)
from .kernels import GramMatrix, KernelSpec, cross_gram, gram, median_heuristic, tune_spec
from .propensity import (
    PropensityModel,
    WeightVector,
    compute_weights,
    fit_propensity,
    mcar_weights,
)
from .hsic import HsicResult, bootstrap_test, hsic_statistic
from .gradsel import LocalityWeights, SelectionResult, fit_gradient, locality_weights, select_lambda
from .krr import KrrModel, fit, impute, loo_lambda, predict, weighted_loo_r2
from .conformal import ConformalCalibration, ConformalInterval, calibrate, interval, intervals
from .simulate import SimDesign, generate, hsic_bruteforce, loo_bruteforce

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "QuantileFunction",
    "SplitIndex",
    "cgm_to_quantile",
    "load_dataset",
    "midpoint_grid",
    "split",
    "GramMatrix",
    "KernelSpec",
    "cross_gram",
    "gram",
    "median_heuristic",
    "tune_spec",
    "PropensityModel",
    "WeightVector",
    "compute_weights",
    "fit_propensity",
    "mcar_weights",
    "HsicResult",
    "bootstrap_test",
    "hsic_statistic",
    "LocalityWeights",
    "SelectionResult",
    "fit_gradient",
    "locality_weights",
    "select_lambda",
    "KrrModel",
    "fit",
    "impute",
    "loo_lambda",
    "predict",
    "weighted_loo_r2",
    "ConformalCalibration",
    "ConformalInterval",
    "calibrate",
    "interval",
    "intervals",
    "SimDesign",
    "generate",
    "hsic_bruteforce",
    "loo_bruteforce",
]
