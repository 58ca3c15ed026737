"""Observation-probability models and inverse-probability weights.

The probability pi(x) that a record's response is observed is modeled by
logistic regression of the observation indicator on the covariates (plain,
ridge- or lasso-penalized).  Fitted probabilities turn into raw weights
mask_i / (n * pi(x_i)) and their normalized version, the two weightings
used across the estimators in this package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import Dataset

MAX_ITER = 200
PARAM_TOL = 1e-8
DEFAULT_CLIP_FLOOR = 0.01
_SATURATION = 10.0  # |linear predictor| beyond which the fit is effectively separated

DISTRIBUTIONAL_FEATURE = "distributional"


class SeparationError(RuntimeError):
    """Perfectly separable observation indicator without regularization."""


@dataclass(frozen=True)
class FeatureMap:
    """Recipe turning a dataset into the logistic design matrix.

    Numeric columns pass through (already standardized), categorical
    columns are one-hot encoded with the first level dropped, and the
    distributional block contributes the mean and spread of each record's
    quantile values, standardized with statistics frozen at fit time.
    """

    numeric: tuple[str, ...]
    categorical: tuple[str, ...]
    use_distributional: bool
    labels: tuple[str, ...]
    gluco_stats: tuple[float, float, float, float] | None = None

    def matrix(self, ds: Dataset) -> np.ndarray:
        cols = []
        for name in self.numeric:
            j = ds.numeric_names.index(name)
            cols.append(ds.numeric[:, j])
        for name in self.categorical:
            j = ds.categorical_names.index(name)
            card = ds.cardinalities[j]
            for level in range(1, card):
                cols.append((ds.categorical[:, j] == level).astype(float))
        if self.use_distributional:
            q = ds.quantile_matrix()
            mu, sd = q.mean(axis=1), q.std(axis=1)
            m_m, m_s, s_m, s_s = self.gluco_stats
            cols.append((mu - m_m) / m_s)
            cols.append((sd - s_m) / s_s)
        if not cols:
            return np.zeros((ds.n, 0))
        return np.column_stack(cols)


def make_feature_map(ds: Dataset, features: Sequence[str] | None = None) -> FeatureMap:
    """Resolve a feature-name subset (default: every available block)."""
    if features is None:
        features = list(ds.numeric_names) + list(ds.categorical_names)
        if ds.has_distributional:
            features.append(DISTRIBUTIONAL_FEATURE)
    numeric, categorical, use_dist = [], [], False
    for f in features:
        if f in ds.numeric_names:
            numeric.append(f)
        elif f in ds.categorical_names:
            categorical.append(f)
        elif f == DISTRIBUTIONAL_FEATURE:
            if not ds.has_distributional:
                raise ValueError("dataset has no distributional block")
            use_dist = True
        else:
            raise ValueError(f"unknown feature {f!r}")
    labels = list(numeric)
    for name in categorical:
        j = ds.categorical_names.index(name)
        card = ds.cardinalities[j]
        levels = ds.categories[j] if ds.categories else tuple(str(c) for c in range(card))
        labels += [f"{name}={levels[lv]}" for lv in range(1, card)]
    stats = None
    if use_dist:
        q = ds.quantile_matrix()
        mu, sd = q.mean(axis=1), q.std(axis=1)
        stats = (
            float(mu.mean()),
            float(mu.std()) or 1.0,
            float(sd.mean()),
            float(sd.std()) or 1.0,
        )
        labels += ["gluco_mean", "gluco_sd"]
    return FeatureMap(
        numeric=tuple(numeric),
        categorical=tuple(categorical),
        use_distributional=use_dist,
        labels=tuple(labels),
        gluco_stats=stats,
    )


@dataclass(frozen=True)
class PropensityModel:
    """Fitted logistic model for P(response observed | covariates)."""

    beta0: float
    beta: np.ndarray
    feature_map: FeatureMap
    regularization: tuple[str, float] | None
    converged: bool
    iterations: int
    clip_floor: float = DEFAULT_CLIP_FLOOR

    def __post_init__(self):
        b = np.ascontiguousarray(self.beta, dtype=float)
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)

    def linear_predictor(self, ds: Dataset) -> np.ndarray:
        return self.beta0 + self.feature_map.matrix(ds) @ self.beta

    def predict(self, ds: Dataset) -> np.ndarray:
        """Observation probabilities, strictly inside (0, 1)."""
        return expit(self.linear_predictor(ds))

    def to_json(self) -> str:
        reg = None if self.regularization is None else list(self.regularization)
        return json.dumps(
            {
                "beta0": self.beta0,
                "beta": self.beta.tolist(),
                "feature_names": list(self.feature_map.labels),
                "regularization": reg,
                "clip_floor": self.clip_floor,
                "converged": self.converged,
                "iterations": self.iterations,
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class WeightVector:
    """Raw IPW weights and their normalization; zero where unobserved."""

    raw: np.ndarray
    clip_floor: float = DEFAULT_CLIP_FLOOR
    provenance: str = ""
    normalized: np.ndarray = field(init=False)

    def __post_init__(self):
        raw = np.ascontiguousarray(self.raw, dtype=float)
        if raw.ndim != 1:
            raise ValueError("weights must be a vector")
        if np.any(raw < 0.0) or not np.all(np.isfinite(raw)):
            raise ValueError("raw weights must be finite and nonnegative")
        total = raw.sum()
        if total <= 0.0:
            raise ValueError("at least one record must carry positive weight")
        if not 0.0 < self.clip_floor <= 0.5:
            raise ValueError("clip_floor must lie in (0, 0.5]")
        raw.setflags(write=False)
        norm = raw / total
        norm.setflags(write=False)
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "normalized", norm)

    @property
    def n(self) -> int:
        return len(self.raw)

    def subset(self, indices) -> "WeightVector":
        """Weights restricted to a row subset, renormalized there."""
        idx = np.asarray(indices, dtype=np.intp)
        return WeightVector(raw=self.raw[idx], clip_floor=self.clip_floor, provenance=self.provenance)


def _negative_log_likelihood(eta: np.ndarray, r: np.ndarray) -> float:
    # -sum[ r*eta - log(1 + e^eta) ], written stably via logaddexp
    return float(np.sum(np.logaddexp(0.0, eta) - r * eta))


def _penalty(beta0: float, beta: np.ndarray, regularization) -> float:
    if regularization is None:
        return 0.0
    kind, lam = regularization
    full = np.concatenate([[beta0], beta])
    if kind == "l2":
        return lam * float(np.sum(full**2))
    if kind == "l1":
        return lam * float(np.sum(np.abs(full)))
    raise ValueError(f"unknown regularization kind {kind!r}")


def _fit_irls(x: np.ndarray, r: np.ndarray, regularization, max_iter: int) -> tuple[float, np.ndarray, bool, int]:
    """IRLS with step halving; handles no penalty and ridge."""
    n, p = x.shape
    lam = regularization[1] if regularization else 0.0
    beta0, beta = 0.0, np.zeros(p)
    eta = np.full(n, beta0)
    obj = _negative_log_likelihood(eta, r) + _penalty(beta0, beta, regularization)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        w = np.maximum(mu * (1.0 - mu), 1e-10)
        grad0 = float(np.sum(r - mu)) - 2.0 * lam * beta0
        grad = x.T @ (r - mu) - 2.0 * lam * beta
        xt_w = x.T * w
        h = np.empty((p + 1, p + 1))
        h[0, 0] = w.sum() + 2.0 * lam
        h[0, 1:] = h[1:, 0] = xt_w.sum(axis=1)
        h[1:, 1:] = xt_w @ x + 2.0 * lam * np.eye(p)
        try:
            step = np.linalg.solve(h, np.concatenate([[grad0], grad]))
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        for _ in range(30):
            nb0 = beta0 + scale * step[0]
            nb = beta + scale * step[1:]
            new_eta = nb0 + x @ nb
            new_obj = _negative_log_likelihood(new_eta, r) + _penalty(nb0, nb, regularization)
            if np.isfinite(new_obj) and new_obj <= obj + 1e-12:
                break
            scale *= 0.5
        if not np.isfinite(new_obj):
            break
        delta = scale * np.max(np.abs(step))
        beta0, beta, eta, obj = nb0, nb, new_eta, new_obj
        if regularization is None and np.all(np.abs(eta) > _SATURATION) and np.all((eta > 0) == (r > 0.5)):
            raise SeparationError(
                "observation indicator is perfectly separable; refit with L2 regularization"
            )
        if delta < PARAM_TOL:
            converged = True
            break
    return beta0, beta, converged, it


def _fit_proximal_l1(x: np.ndarray, r: np.ndarray, lam: float, max_iter: int) -> tuple[float, np.ndarray, bool, int]:
    """Proximal gradient with backtracking for the lasso-penalized fit."""
    n, p = x.shape
    theta = np.zeros(p + 1)
    xa = np.column_stack([np.ones(n), x])

    def smooth(th):
        return _negative_log_likelihood(xa @ th, r)

    def grad(th):
        return -xa.T @ (r - expit(xa @ th))

    t = 1.0
    f = smooth(theta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = grad(theta)
        while True:
            z = theta - t * g
            z = np.sign(z) * np.maximum(np.abs(z) - t * lam, 0.0)
            diff = z - theta
            if smooth(z) <= f + g @ diff + diff @ diff / (2.0 * t) + 1e-12:
                break
            t *= 0.5
            if t < 1e-16:
                break
        delta = np.max(np.abs(diff))
        theta = z
        f = smooth(theta)
        t *= 1.2
        if delta < PARAM_TOL:
            converged = True
            break
    return float(theta[0]), theta[1:], converged, it


def fit_propensity(
    ds: Dataset,
    features: Sequence[str] | None = None,
    regularization: tuple[str, float] | None = None,
    *,
    clip_floor: float = DEFAULT_CLIP_FLOOR,
    max_iter: int = MAX_ITER,
) -> PropensityModel:
    """Fit the observation model by penalized Bernoulli likelihood.

    Plain and ridge fits use iteratively reweighted least squares with
    step halving; the lasso fit uses proximal gradient with backtracking.
    Penalties apply to the full parameter vector including the intercept,
    which keeps degenerate all-observed fits finite.
    """
    r = ds.mask.astype(float)
    if regularization is None and (r.min() == r.max()):
        raise ValueError("constant observation indicator requires a regularized fit")
    if regularization is not None:
        kind, lam = regularization
        if kind not in ("l1", "l2"):
            raise ValueError(f"unknown regularization kind {kind!r}")
        if lam <= 0.0:
            raise ValueError("regularization strength must be positive")
    fmap = make_feature_map(ds, features)
    x = fmap.matrix(ds)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in propensity features")
    if regularization is not None and regularization[0] == "l1":
        beta0, beta, converged, iters = _fit_proximal_l1(x, r, regularization[1], max_iter)
    else:
        beta0, beta, converged, iters = _fit_irls(x, r, regularization, max_iter)
    return PropensityModel(
        beta0=beta0,
        beta=beta,
        feature_map=fmap,
        regularization=regularization,
        converged=converged,
        iterations=iters,
        clip_floor=clip_floor,
    )


def compute_weights(
    ds: Dataset,
    model: PropensityModel,
    clip_floor: float | None = None,
) -> WeightVector:
    """IPW weights mask_i / (n * max(pi_i, clip_floor)) and their normalization."""
    floor = model.clip_floor if clip_floor is None else clip_floor
    if not ds.mask.any():
        raise ValueError("no observed responses; weights undefined")
    pi = np.maximum(model.predict(ds), floor)
    raw = np.where(ds.mask, 1.0 / (ds.n * pi), 0.0)
    reg = "none" if model.regularization is None else f"{model.regularization[0]}({model.regularization[1]:g})"
    prov = f"logistic-ipw(features={list(model.feature_map.labels)}, reg={reg}, clip={floor:g})"
    return WeightVector(raw=raw, clip_floor=floor, provenance=prov)


def mcar_weights(ds: Dataset, clip_floor: float = DEFAULT_CLIP_FLOOR) -> WeightVector:
    """Baseline weights under a covariate-free observation mechanism."""
    if not ds.mask.any():
        raise ValueError("no observed responses; weights undefined")
    pi = max(float(ds.mask.mean()), clip_floor)
    raw = np.where(ds.mask, 1.0 / (ds.n * pi), 0.0)
    return WeightVector(raw=raw, clip_floor=clip_floor, provenance=f"mcar(pi={pi:g})")
