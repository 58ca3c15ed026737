"""Kernel ridge regression with missing responses.

Three estimators share the representer form f(x) = sum_j alpha_j K(X_j, x):

* ``complete_case`` -- plain KRR on the observed records.
* ``ipw`` -- weighted KRR solving (lam*I + W K) alpha = W y with W the
  diagonal of raw observation weights, the minimizer of the weighted
  ridge objective (unobserved records get zero dual coefficient).
* ``doubly_robust`` -- ridge on the pseudo-response W y + (I - W) mu with
  mu an imputation model fitted on the observed records.

Regularization is tuned by exact leave-one-out shortcuts for the linear
smoother of each mode.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve

from .dataset import Dataset
from .kernels import KernelSpec, cross_gram, gram
from .propensity import WeightVector

MODES = ("complete_case", "ipw", "doubly_robust")
_JITTER_ROUNDS = 3


class SingularSystemError(RuntimeError):
    """Linear system stayed numerically singular after jitter escalation."""


def _solve_sym(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cholesky solve with jitter escalation for borderline PSD systems."""
    jitter = 0.0
    step = 1e-10 * np.trace(a) / a.shape[0]
    for _ in range(_JITTER_ROUNDS + 1):
        try:
            c = cho_factor(a + jitter * np.eye(a.shape[0]), lower=True)
            return cho_solve(c, b)
        except np.linalg.LinAlgError:
            jitter = step if jitter == 0.0 else jitter * 10.0
    pivot = float(np.linalg.eigvalsh(a)[0])
    raise SingularSystemError(f"symmetric system singular; smallest pivot {pivot:.3e}")


def _solve_general(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """LU solve with jitter escalation; reports the smallest pivot on failure."""
    jitter = 0.0
    step = 1e-10 * np.abs(np.trace(a)) / a.shape[0]
    scale = np.abs(a).max()
    for _ in range(_JITTER_ROUNDS + 1):
        lu, piv = lu_factor(a + jitter * np.eye(a.shape[0]))
        min_pivot = float(np.abs(np.diag(lu)).min())
        if min_pivot > 1e-14 * scale:
            return lu_solve((lu, piv), b)
        jitter = step if jitter == 0.0 else jitter * 10.0
    raise SingularSystemError(f"system singular; smallest pivot {min_pivot:.3e}")


@dataclass(frozen=True)
class KrrModel:
    """Fitted dual coefficients plus everything needed to predict."""

    alpha: np.ndarray
    center_indices: np.ndarray
    lam: float
    spec: KernelSpec
    mode: str
    training: Dataset
    training_ref: str
    loo_error: float = float("nan")
    imputer: "KrrModel | None" = None

    def __post_init__(self):
        a = np.ascontiguousarray(self.alpha, dtype=float)
        ci = np.ascontiguousarray(self.center_indices, dtype=np.intp)
        a.setflags(write=False)
        ci.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "center_indices", ci)

    def to_json(self) -> str:
        payload = {
            "alpha": self.alpha.tolist(),
            "center_indices": self.center_indices.tolist(),
            "lambda": self.lam,
            "spec": json.loads(self.spec.to_json()),
            "mode": self.mode,
            "training_ref": self.training_ref,
            "loo_error": self.loo_error,
            "response_mean": self.training.response_mean,
            "response_scale": self.training.response_scale,
            "imputer": json.loads(self.imputer.to_json()) if self.imputer else None,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, training: Dataset) -> "KrrModel":
        d = json.loads(text)
        if d["training_ref"] != training.fingerprint():
            raise ValueError("training dataset does not match the model's fingerprint")
        imputer = None
        if d["imputer"] is not None:
            imputer = cls.from_json(json.dumps(d["imputer"]), training)
        return cls(
            alpha=np.asarray(d["alpha"]),
            center_indices=np.asarray(d["center_indices"]),
            lam=d["lambda"],
            spec=KernelSpec(**d["spec"]),
            mode=d["mode"],
            training=training,
            training_ref=d["training_ref"],
            loo_error=d["loo_error"],
            imputer=imputer,
        )


def _check_compatible(training: Dataset, query: Dataset, spec: KernelSpec) -> None:
    if training.numeric_names != query.numeric_names:
        raise ValueError("query numeric columns do not match the training schema")
    if training.categorical_names != query.categorical_names or training.cardinalities != query.cardinalities:
        raise ValueError("query categorical columns do not match the training schema")
    if spec.a > 0.0 and not query.has_distributional:
        raise ValueError("kernel uses the distributional block but the query has none")


def _mu_standardized(ds: Dataset, mu: np.ndarray | None, imputer: "KrrModel | None") -> np.ndarray:
    if imputer is not None:
        raw = predict(imputer, ds)
        return (raw - ds.response_mean) / ds.response_scale
    if mu is None:
        raise ValueError("doubly_robust mode requires an imputation model or mu values")
    mu = np.asarray(mu, dtype=float)
    if len(mu) != ds.n:
        raise ValueError("mu must provide one value per record")
    return (mu - ds.response_mean) / ds.response_scale


def fit(
    ds: Dataset,
    spec: KernelSpec,
    weights: WeightVector | None,
    lam: float,
    mode: str = "ipw",
    *,
    mu: np.ndarray | None = None,
    imputer: "KrrModel | None" = None,
    loo_error: float = float("nan"),
) -> KrrModel:
    """Solve the mode's linear system at regularization ``lam``."""
    if lam <= 0.0:
        raise ValueError("lambda must be strictly positive")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    k = gram(ds, spec).values
    n = ds.n
    if mode == "complete_case":
        obs = ds.observed_indices()
        if len(obs) == 0:
            raise ValueError("complete_case mode needs observed responses")
        koo = k[np.ix_(obs, obs)]
        alpha = _solve_sym(koo + lam * np.eye(len(obs)), ds.response[obs])
        centers = obs
    elif mode == "ipw":
        if weights is None:
            raise ValueError("ipw mode requires weights")
        raw = weights.raw
        assert np.all(raw[~ds.mask] == 0.0), "raw weights must vanish where the response is missing"
        y = ds.response_filled(0.0)
        alpha = _solve_general(lam * np.eye(n) + raw[:, None] * k, raw * y)
        centers = np.arange(n)
    else:
        if weights is None:
            raise ValueError("doubly_robust mode requires weights")
        raw = weights.raw
        assert np.all(raw[~ds.mask] == 0.0), "raw weights must vanish where the response is missing"
        mu_std = _mu_standardized(ds, mu, imputer)
        z = raw * ds.response_filled(0.0) + (1.0 - raw) * mu_std
        alpha = _solve_sym(k + lam * np.eye(n), z)
        centers = np.arange(n)
    return KrrModel(
        alpha=alpha,
        center_indices=centers,
        lam=lam,
        spec=spec,
        mode=mode,
        training=ds,
        training_ref=ds.fingerprint(),
        loo_error=loo_error,
        imputer=imputer,
    )


def predict(model: KrrModel, query: Dataset) -> np.ndarray:
    """Representer predictions at the query records, in response units."""
    _check_compatible(model.training, query, model.spec)
    centers = model.training.subset(model.center_indices)
    kq = cross_gram(centers, query, model.spec)
    f_std = kq.T @ model.alpha
    return model.training.destandardize_response(f_std)


def impute(
    ds: Dataset,
    spec: KernelSpec,
    lambda_mu: float | None = None,
    grid: Sequence[float] | None = None,
) -> KrrModel:
    """Complete-case imputation model for the doubly robust estimator."""
    if ds.n_observed < 2:
        raise ValueError("need at least 2 observed responses to fit the imputer")
    if lambda_mu is None:
        lambda_mu, _ = loo_lambda(ds, spec, None, grid=grid, mode="complete_case")
    return fit(ds, spec, None, lambda_mu, mode="complete_case")


def default_lambda_grid(ds: Dataset, spec: KernelSpec, size: int = 20) -> np.ndarray:
    """Logarithmic grid spanning [1e-6, 1e2] times trace(K)/n."""
    scale = float(np.trace(gram(ds, spec).values)) / ds.n
    return scale * np.logspace(-6.0, 2.0, size)


def _loo_parts(
    ds: Dataset,
    spec: KernelSpec,
    weights: WeightVector | None,
    lam: float,
    mode: str,
    mu: np.ndarray | None = None,
    imputer: "KrrModel | None" = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smoother targets, fits and diagonal entries for LOO shortcuts.

    Returns (target, fitted, hat_diagonal) over the smoother's own index
    set: observed records for complete_case, all records otherwise.
    """
    k = gram(ds, spec).values
    n = ds.n
    if mode == "complete_case":
        obs = ds.observed_indices()
        koo = k[np.ix_(obs, obs)]
        b = koo + lam * np.eye(len(obs))
        binv = _solve_sym(b, np.eye(len(obs)))
        y = ds.response[obs]
        fitted = koo @ (binv @ y)
        hdiag = np.einsum("ij,ji->i", koo, binv)
        return y, fitted, hdiag
    if mode == "ipw":
        if weights is None:
            raise ValueError("ipw mode requires weights")
        raw = weights.raw
        a = lam * np.eye(n) + raw[:, None] * k
        ainv = _solve_general(a, np.eye(n))
        y = ds.response_filled(0.0)
        alpha = ainv @ (raw * y)
        fitted = k @ alpha
        hdiag = 1.0 - lam * np.diag(ainv)
        return y, fitted, hdiag
    if mode == "doubly_robust":
        if weights is None:
            raise ValueError("doubly_robust mode requires weights")
        raw = weights.raw
        mu_std = _mu_standardized(ds, mu, imputer)
        z = raw * ds.response_filled(0.0) + (1.0 - raw) * mu_std
        b = k + lam * np.eye(n)
        binv = _solve_sym(b, np.eye(n))
        fitted = k @ (binv @ z)
        hdiag = np.einsum("ij,ji->i", k, binv)
        return z, fitted, hdiag
    raise ValueError(f"unknown mode {mode!r}")


def loo_residuals(
    ds: Dataset,
    spec: KernelSpec,
    weights: WeightVector | None,
    lam: float,
    mode: str = "ipw",
    *,
    mu: np.ndarray | None = None,
    imputer: "KrrModel | None" = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact leave-one-out residuals (standardized scale) at observed records.

    Uses the generalized ridge shortcut: the LOO prediction at record i is
    (fitted_i - h_ii * target_i) / (1 - h_ii), which reproduces a refit
    without record i for each mode's smoother.  Raises when any needed
    hat-diagonal reaches 1.
    """
    target, fitted, hdiag = _loo_parts(ds, spec, weights, lam, mode, mu, imputer)
    obs = ds.observed_indices()
    if mode == "complete_case":
        h = hdiag
        y = target
        f = fitted
    else:
        h = hdiag[obs]
        y = ds.response[obs]
        f = fitted[obs]
        target = target[obs]
    if np.any(h >= 1.0):
        raise FloatingPointError(f"hat diagonal reaches 1 (max {h.max():.6f}); smoother degenerate at lambda={lam:g}")
    loo_pred = (f - h * target) / (1.0 - h)
    return obs, y - loo_pred


def _normalized_obs_weights(ds: Dataset, weights: WeightVector | None, obs: np.ndarray) -> np.ndarray:
    if weights is None:
        return np.full(len(obs), 1.0 / len(obs))
    w = weights.normalized[obs]
    return w / w.sum()


def loo_lambda(
    ds: Dataset,
    spec: KernelSpec,
    weights: WeightVector | None,
    grid: Sequence[float] | None = None,
    mode: str = "ipw",
    *,
    mu: np.ndarray | None = None,
    imputer: "KrrModel | None" = None,
) -> tuple[float, float]:
    """Pick lambda minimizing the weighted LOO error over a grid.

    The error is sum_i w*_i e_i^2 over observed records with normalized
    weights.  Degenerate grid points (hat diagonal at 1, singular system)
    are skipped with a warning; ties prefer the larger lambda.
    """
    if grid is None:
        grid = default_lambda_grid(ds, spec)
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("lambda grid must be nonempty")
    if any(g <= 0.0 for g in grid):
        raise ValueError("lambda grid values must be positive")
    best: tuple[float, float] | None = None
    for lam in grid:
        try:
            obs, resid = loo_residuals(ds, spec, weights, lam, mode, mu=mu, imputer=imputer)
        except (FloatingPointError, SingularSystemError) as exc:
            warnings.warn(f"lambda={lam:g} skipped: {exc}")
            continue
        w = _normalized_obs_weights(ds, weights, obs)
        err = float(np.sum(w * resid**2))
        if best is None or err <= best[1]:
            best = (lam, err)
    if best is None:
        raise RuntimeError("every lambda in the grid was skipped")
    return best


def weighted_loo_r2(
    ds: Dataset,
    spec: KernelSpec,
    weights: WeightVector | None,
    lam: float,
    mode: str = "ipw",
    *,
    mu: np.ndarray | None = None,
    imputer: "KrrModel | None" = None,
) -> float:
    """Weighted leave-one-out R^2: 1 - sum w* e^2 / sum w* (y - wmean)^2."""
    obs, resid = loo_residuals(ds, spec, weights, lam, mode, mu=mu, imputer=imputer)
    w = _normalized_obs_weights(ds, weights, obs)
    y = ds.response[obs]
    ybar = float(np.sum(w * y))
    denom = float(np.sum(w * (y - ybar) ** 2))
    if denom == 0.0:
        raise ValueError("observed responses are constant; R^2 undefined")
    return 1.0 - float(np.sum(w * resid**2)) / denom
