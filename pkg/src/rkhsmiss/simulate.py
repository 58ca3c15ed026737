"""Synthetic data with known ground truth, plus brute-force test oracles.

Generators draw standard-normal numeric covariates, uniform categorical
codes and optional per-record Gaussian quantile functions; the response
follows a cataloged signal plus Gaussian noise and the observation mask
follows a configurable mechanism.  The module also hosts the slow,
literal evaluations (triple-sum independence statistic, refit-per-record
leave-one-out, concatenated-sample bootstrap replicate) that the fast
implementations are tested against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import expit, ndtri

from .dataset import Dataset, QuantileFunction, midpoint_grid
from .kernels import GramMatrix, KernelSpec, gram
from .propensity import WeightVector
from . import krr

BRUTEFORCE_MAX_N = 30

SIGNALS = ("null", "linear", "additive_nonlinear", "interaction", "quantile_signal")
MECHANISMS = ("mcar", "mar_logistic", "mnar_age_like")


@dataclass(frozen=True)
class SimDesign:
    """Sizes, signal choice, noise level and missingness mechanism.

    ``mechanism`` examples:
        {"kind": "mcar", "p": 0.6}
        {"kind": "mar_logistic", "beta0": 0.5, "beta": [1.0, 0.0]}
        {"kind": "mnar_age_like", "beta0": 0.5, "beta": 1.0}
    The age-like mechanism makes observation probability decrease in the
    first numeric covariate.
    """

    n: int
    p_num: int = 1
    p_cat: int = 0
    signal: str = "linear"
    noise_sd: float = 1.0
    mechanism: Mapping = field(default_factory=lambda: {"kind": "mcar", "p": 1.0})
    seed: int = 0
    grid_size: int = 25
    with_distributional: bool | None = None

    def __post_init__(self):
        if self.signal not in SIGNALS:
            raise ValueError(f"unknown signal {self.signal!r}")
        kind = self.mechanism.get("kind")
        if kind not in MECHANISMS:
            raise ValueError(f"unknown mechanism {kind!r}")
        if kind == "mcar" and not 0.0 < float(self.mechanism.get("p", 1.0)) <= 1.0:
            raise ValueError("mcar observation probability must lie in (0, 1]")
        if self.noise_sd < 0.0:
            raise ValueError("noise_sd must be nonnegative")
        if self.with_distributional is None:
            object.__setattr__(self, "with_distributional", self.signal == "quantile_signal")
        if self.signal == "quantile_signal" and not self.with_distributional:
            raise ValueError("quantile_signal requires the distributional block")


def _signal_values(design: SimDesign, x: np.ndarray, gluco_mean: np.ndarray | None):
    if design.signal == "null":
        return np.zeros(design.n), (), 0.0
    if design.signal == "linear":
        return 3.0 * x[:, 0], (0,), 0.0
    if design.signal == "additive_nonlinear":
        if design.p_num < 2:
            raise ValueError("additive_nonlinear needs at least 2 numeric covariates")
        return np.sin(np.pi * x[:, 0]) + 0.5 * x[:, 1] ** 2, (0, 1), 0.5
    if design.signal == "interaction":
        if design.p_num < 2:
            raise ValueError("interaction needs at least 2 numeric covariates")
        return 2.0 * x[:, 0] * x[:, 1], (0, 1), 0.0
    return 2.0 * gluco_mean, ("distributional",), 0.0


def _observation_probability(design: SimDesign, x: np.ndarray) -> np.ndarray:
    mech = design.mechanism
    kind = mech["kind"]
    if kind == "mcar":
        return np.full(design.n, float(mech.get("p", 1.0)))
    if kind == "mar_logistic":
        beta = np.zeros(design.p_num)
        given = np.asarray(mech.get("beta", []), dtype=float)
        beta[: len(given)] = given[: design.p_num]
        return expit(float(mech.get("beta0", 0.0)) + x @ beta)
    # observation probability decreasing in the age-like first covariate
    return expit(float(mech.get("beta0", 0.5)) - abs(float(mech.get("beta", 1.0))) * x[:, 0])


def generate(design: SimDesign) -> tuple[Dataset, dict]:
    """Draw one dataset; the truth record keeps the signal, probabilities
    and active set.

    Covariates are emitted already standardized (unit normal scale) and
    the response is left in its natural units with identity
    standardization, so truth comparisons need no unit conversion.
    """
    rng = np.random.default_rng(design.seed)
    x = rng.standard_normal((design.n, design.p_num))
    cat = rng.integers(0, 2, size=(design.n, design.p_cat))

    distributional = None
    gluco_mean = None
    if design.with_distributional:
        gluco_mean = rng.standard_normal(design.n)
        gluco_sd = rng.uniform(0.5, 1.5, design.n)
        grid = midpoint_grid(design.grid_size)
        zgrid = ndtri(grid)
        distributional = tuple(
            QuantileFunction(grid=grid, values=m + s * zgrid)
            for m, s in zip(gluco_mean, gluco_sd)
        )

    m_values, active, expected = _signal_values(design, x, gluco_mean)
    y = m_values + design.noise_sd * rng.standard_normal(design.n)
    pi = _observation_probability(design, x)
    mask = rng.uniform(size=design.n) < pi

    truth = {
        "m": m_values,
        "pi": pi,
        "active": active,
        "expected_response": expected,
        "signal": design.signal,
    }
    ds = Dataset(
        numeric=x,
        categorical=cat,
        response=np.where(mask, y, np.nan),
        mask=mask,
        distributional=distributional,
    )
    return ds, truth


def hsic_bruteforce(kx: GramMatrix | np.ndarray, ky: GramMatrix | np.ndarray, w: np.ndarray) -> float:
    """Literal triple-sum evaluation of the weighted independence statistic."""
    kxm = kx.values if isinstance(kx, GramMatrix) else np.asarray(kx, dtype=float)
    kym = ky.values if isinstance(ky, GramMatrix) else np.asarray(ky, dtype=float)
    n = kxm.shape[0]
    if n > BRUTEFORCE_MAX_N:
        raise ValueError(f"brute force limited to n <= {BRUTEFORCE_MAX_N}")
    w = np.asarray(w, dtype=float)
    t1 = 0.0
    t2x = 0.0
    t2y = 0.0
    t3 = 0.0
    for i in range(n):
        for j in range(n):
            t1 += w[i] * w[j] * kxm[i, j] * kym[i, j]
            t2x += w[i] * w[j] * kxm[i, j]
            t2y += w[i] * w[j] * kym[i, j]
            for k in range(n):
                t3 += w[i] * w[j] * w[k] * kxm[i, j] * kym[i, k]
    return t1 + t2x * t2y - 2.0 * t3


def bootstrap_replicate_bruteforce(
    kx: np.ndarray, ky: np.ndarray, w: np.ndarray, v: np.ndarray, idx: np.ndarray
) -> float:
    """Centered replicate statistic via the concatenated 2n-point sample.

    Builds the coefficient matrix of the difference element over the
    stacked (original, resampled) index set and evaluates its squared
    norm through the 2n x 2n Gram blocks; an independent path against the
    expanded kernel-sum implementation.
    """
    n = kx.shape[0]
    if n > BRUTEFORCE_MAX_N:
        raise ValueError(f"brute force limited to n <= {BRUTEFORCE_MAX_N}")
    cat = np.concatenate([np.arange(n), idx])
    gx = kx[np.ix_(cat, cat)]
    gy = ky[np.ix_(cat, cat)]
    p = np.concatenate([w, -v])
    cx_orig = np.concatenate([w, np.zeros(n)])
    cx_res = np.concatenate([np.zeros(n), v])
    m = np.diag(p) + np.outer(cx_res, cx_res) - np.outer(cx_orig, cx_orig)
    return float(np.sum(m * (gx @ m @ gy)))


def loo_bruteforce(
    ds: Dataset,
    spec: KernelSpec,
    weights: WeightVector | None,
    lam: float,
    mode: str = "ipw",
    *,
    mu: np.ndarray | None = None,
    imputer: "krr.KrrModel | None" = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Refit-without-i leave-one-out residuals for every observed record."""
    if ds.n > BRUTEFORCE_MAX_N:
        raise ValueError(f"brute force limited to n <= {BRUTEFORCE_MAX_N}")
    obs = ds.observed_indices()
    residuals = np.empty(len(obs))
    for pos, i in enumerate(obs):
        keep = np.setdiff1d(np.arange(ds.n), [i])
        sub = ds.subset(keep)
        w_sub = None
        if weights is not None:
            w_sub = WeightVector(
                raw=weights.raw[keep], clip_floor=weights.clip_floor, provenance=weights.provenance
            )
        mu_sub = None if mu is None else np.asarray(mu)[keep]
        model = krr.fit(sub, spec, w_sub, lam, mode, mu=mu_sub, imputer=imputer)
        pred = krr.predict(model, ds.subset([i]))[0]
        pred_std = (pred - ds.response_mean) / ds.response_scale
        residuals[pos] = ds.response[i] - pred_std
    return obs, residuals
