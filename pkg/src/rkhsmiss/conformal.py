"""Split conformal prediction intervals with observation-weighted quantiles.

The data are split once; the regression function and the observation
model are fitted on the training fold, absolute residuals are collected
on the observed test-fold records, and each query builds a discrete
distribution over those residuals (mass proportional to one over the
fitted observation probability) plus an atom at +inf carrying the query
point's own weight.  The interval half-width is the (1 - alpha) quantile
of that distribution; reaching the +inf atom yields an infinite interval,
reported as such.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Dataset, SplitIndex
from .kernels import KernelSpec
from .propensity import PropensityModel, WeightVector, compute_weights, fit_propensity
from .weighted import weighted_quantile
from . import krr


@dataclass(frozen=True)
class ConformalInterval:
    """Symmetric interval center +- half_width at confidence ``level``."""

    center: float
    half_width: float
    level: float

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.half_width)


@dataclass(frozen=True)
class ConformalCalibration:
    """Held-out absolute residuals with their unnormalized IPW weights."""

    residuals: np.ndarray
    weights: np.ndarray
    alpha: float
    model: krr.KrrModel
    propensity: PropensityModel
    clip_floor: float

    def __post_init__(self):
        r = np.ascontiguousarray(self.residuals, dtype=float)
        w = np.ascontiguousarray(self.weights, dtype=float)
        if np.any(r < 0.0):
            raise ValueError("absolute residuals must be nonnegative")
        if np.any(w < 0.0):
            raise ValueError("calibration weights must be nonnegative")
        r.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "residuals", r)
        object.__setattr__(self, "weights", w)


def calibrate(
    ds: Dataset,
    split: SplitIndex,
    spec: KernelSpec,
    alpha: float,
    *,
    mode: str = "doubly_robust",
    lambda_grid: Sequence[float] | None = None,
    propensity_features: Sequence[str] | None = None,
    propensity_regularization: tuple[str, float] | None = ("l2", 1e-3),
    clip_floor: float = 0.01,
) -> ConformalCalibration:
    """Fit on the training fold and collect weighted held-out residuals.

    The regression function uses the requested missing-data mode with its
    LOO-tuned regularization; the observation model is fitted on the same
    training fold and supplies both the fit weights and the calibration
    weights 1/pi(x).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    train = ds.subset(split.training)
    test = ds.subset(split.test)
    if train.n_observed < 2:
        raise ValueError("training fold needs at least 2 observed responses")
    needed = math.ceil(1.0 / alpha)
    if test.n_observed < needed:
        raise ValueError(
            f"test fold needs at least {needed} observed responses at alpha={alpha:g}, got {test.n_observed}"
        )

    prop = fit_propensity(train, propensity_features, propensity_regularization, clip_floor=clip_floor)
    weights = compute_weights(train, prop)
    imputer = None
    if mode == "doubly_robust":
        imputer = krr.impute(train, spec, grid=lambda_grid)
    lam, loo_err = krr.loo_lambda(train, spec, weights, grid=lambda_grid, mode=mode, imputer=imputer)
    model = krr.fit(train, spec, weights, lam, mode, imputer=imputer, loo_error=loo_err)

    obs = test.observed_indices()
    obs_test = test.subset(obs)
    predictions = krr.predict(model, obs_test)
    residuals = np.abs(obs_test.raw_response() - predictions)
    pi = np.maximum(prop.predict(obs_test), clip_floor)
    return ConformalCalibration(
        residuals=residuals,
        weights=1.0 / pi,
        alpha=alpha,
        model=model,
        propensity=prop,
        clip_floor=clip_floor,
    )


def _interval_from_atoms(
    cal: ConformalCalibration, center: float, query_weight: float, alpha: float
) -> ConformalInterval:
    values = np.concatenate([cal.residuals, [np.inf]])
    masses = np.concatenate([cal.weights, [query_weight]])
    q = weighted_quantile(values, masses, 1.0 - alpha)
    return ConformalInterval(center=float(center), half_width=float(q), level=1.0 - alpha)


def intervals(
    cal: ConformalCalibration, query: Dataset, alpha: float | None = None
) -> list[ConformalInterval]:
    """Prediction intervals at the query records.

    Masses are normalized per query, including the query point's own
    weight on the +inf atom, so very small fitted observation
    probabilities widen the interval monotonically.
    """
    a = cal.alpha if alpha is None else alpha
    if not 0.0 < a < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    centers = krr.predict(cal.model, query)
    pi_new = np.maximum(cal.propensity.predict(query), cal.clip_floor)
    return [
        _interval_from_atoms(cal, c, 1.0 / p, a)
        for c, p in zip(centers, pi_new)
    ]


def interval(cal: ConformalCalibration, query: Dataset, index: int = 0) -> ConformalInterval:
    """Interval for a single record of ``query``."""
    return intervals(cal, query.subset([index]))[0]
