"""Weighted Hilbert-Schmidt independence criterion and its bootstrap test.

The statistic is the squared RKHS distance between the weighted joint
embedding and the product of the weighted marginal embeddings, written as
pure kernel sums.  Calibration resamples records with replacement,
recomputes observation weights per resample, and evaluates a centered
replicate statistic (a plain permutation null is not valid here); the
p-value is the fraction of replicate statistics at or above the observed
one.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import Dataset
from .kernels import GramMatrix, KernelSpec, gaussian_gram_1d, gram, median_heuristic, pair_masses
from .propensity import WeightVector, mcar_weights

MIN_REPLICATES = 99
_WEIGHT_SUM_TOL = 1e-10
MAX_RESAMPLE_RETRIES = 10


@dataclass(frozen=True)
class HsicResult:
    """Observed statistic, bootstrap replicates and the exceedance p-value."""

    statistic: float
    replicates: np.ndarray
    p_value: float
    m: int
    seed: int
    weights_ref: str = ""

    def __post_init__(self):
        reps = np.ascontiguousarray(self.replicates, dtype=float)
        reps.setflags(write=False)
        object.__setattr__(self, "replicates", reps)
        if len(reps) != self.m:
            raise ValueError("replicate count must equal m")
        expected = float(np.sum(reps >= self.statistic)) / self.m
        if self.p_value != expected:
            raise ValueError("p_value must equal the exceedance fraction exactly")


def _as_matrix(k: GramMatrix | np.ndarray) -> np.ndarray:
    return k.values if isinstance(k, GramMatrix) else np.asarray(k, dtype=float)


def hsic_statistic(kx: GramMatrix | np.ndarray, ky: GramMatrix | np.ndarray, w: np.ndarray) -> float:
    """Weighted HSIC from two Gram matrices and normalized record weights.

    Evaluates T1 + T2 - 2*T3 with
        T1 = sum_ij w_i w_j Kx_ij Ky_ij
        T2 = (sum_ij w_i w_j Kx_ij) * (sum_ij w_i w_j Ky_ij)
        T3 = sum_i w_i (Kx w)_i (Ky w)_i
    in O(n^2); T3 agrees with the triple sum over (i, j, k).
    """
    kxm, kym = _as_matrix(kx), _as_matrix(ky)
    if kxm.shape != kym.shape:
        raise ValueError("Gram matrices must have equal shape")
    w = np.asarray(w, dtype=float)
    if len(w) != kxm.shape[0]:
        raise ValueError("weights must match the Gram size")
    if abs(w.sum() - 1.0) > _WEIGHT_SUM_TOL:
        raise ValueError("weights must be normalized to sum 1")
    kxw = kxm @ w
    kyw = kym @ w
    t1 = float(w @ ((kxm * kym) @ w))
    t2 = float((w @ kxw) * (w @ kyw))
    t3 = float(w @ (kxw * kyw))
    return t1 + t2 - 2.0 * t3


def _replicate_statistic(
    kx: np.ndarray,
    ky: np.ndarray,
    w: np.ndarray,
    v: np.ndarray,
    idx: np.ndarray,
    base: tuple[float, float, float, np.ndarray, np.ndarray],
) -> float:
    """Centered bootstrap statistic expanded into kernel sums.

    Measures the squared RKHS norm of
        (joint_orig - joint_boot) + (prod_boot - prod_orig)
    mixing original weights ``w`` with resample weights ``v`` carried by
    the resampled index set ``idx``.  ``base`` caches the original-only
    terms (t_aa, t_cc, t_ac, Kx w, Ky w).
    """
    t_aa, t_cc, t_ac, kxw, kyw = base
    kx_or = kx[:, idx]
    ky_or = ky[:, idx]
    kx_rr = kx_or[idx, :]
    ky_rr = ky_or[idx, :]

    kx_or_v = kx_or @ v
    ky_or_v = ky_or @ v
    kx_rr_v = kx_rr @ v
    ky_rr_v = ky_rr @ v
    kx_ro_w = kx_or.T @ w
    ky_ro_w = ky_or.T @ w

    t_bb = float(v @ ((kx_rr * ky_rr) @ v))
    t_ab = float(w @ ((kx_or * ky_or) @ v))
    t_dd = float((v @ kx_rr_v) * (v @ ky_rr_v))
    t_cd = float((w @ kx_or_v) * (w @ ky_or_v))
    t_ad = float(w @ (kx_or_v * ky_or_v))
    t_bc = float(v @ (kx_ro_w * ky_ro_w))
    t_bd = float(v @ (kx_rr_v * ky_rr_v))
    return (
        t_aa + t_bb + t_dd + t_cc
        - 2.0 * t_ab + 2.0 * t_ad - 2.0 * t_ac - 2.0 * t_bd + 2.0 * t_bc - 2.0 * t_cd
    )


def default_response_spec(ds: Dataset, weights: WeightVector) -> KernelSpec:
    """Gaussian response kernel with the IPW-weighted median bandwidth.

    The heuristic uses observed responses only, with pair masses from the
    normalized weights.
    """
    obs = ds.observed_indices()
    if len(obs) < 2:
        raise ValueError("need at least 2 observed responses")
    y = ds.response[obs]
    d2 = (y[:, None] - y[None, :]) ** 2
    iu = np.triu_indices(len(obs), k=1)
    sigma = median_heuristic(d2[iu], pair_masses(weights.normalized[obs]))
    return KernelSpec(b=1.0, a=0.0, c=0.0, sigma_mult=sigma)


def response_gram(ds: Dataset, spec_y: KernelSpec) -> np.ndarray:
    """Gram matrix of the response kernel over all records.

    Missing responses are filled with zero; every appearance of such a
    record in the statistic carries weight zero, so the fill value never
    contributes.
    """
    if spec_y.b != 1.0 or spec_y.a != 0.0 or spec_y.c != 0.0:
        raise ValueError("response kernel spec must put all weight on the numeric source")
    return gaussian_gram_1d(ds.response_filled(0.0), spec_y.sigma_mult)


def bootstrap_test(
    ds: Dataset,
    spec_x: KernelSpec,
    spec_y: KernelSpec,
    weights: WeightVector,
    m: int,
    seed: int,
    *,
    weight_fitter: Callable[[Dataset], WeightVector] | None = None,
    reuse_weights: bool = False,
    threads: int = 1,
) -> HsicResult:
    """Bootstrap-calibrated independence test with missing responses.

    Each of the ``m`` replicates resamples n records with replacement,
    rebuilds the observation weights on the resample (``weight_fitter``,
    defaulting to the covariate-free baseline; or the original fitted
    probabilities when ``reuse_weights`` is set) and evaluates the
    centered replicate statistic.  Kernel bandwidths stay frozen at their
    original-sample values.  Replicates draw from per-index RNG
    substreams, so results are reproducible bit for bit at any thread
    count.
    """
    if m < MIN_REPLICATES:
        raise ValueError(f"need at least {MIN_REPLICATES} bootstrap replicates")
    if ds.n_observed < 2:
        raise ValueError("need at least 2 observed responses")
    kx = gram(ds, spec_x).values
    ky = response_gram(ds, spec_y)
    w = weights.normalized
    observed = ds.mask
    if weight_fitter is None:
        weight_fitter = mcar_weights

    stat = hsic_statistic(kx, ky, w)
    kxw = kx @ w
    kyw = ky @ w
    base = (
        float(w @ ((kx * ky) @ w)),
        float((w @ kxw) * (w @ kyw)),
        float(w @ (kxw * kyw)),
        kxw,
        kyw,
    )

    def one_replicate(j: int) -> float:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(j,)))
        for _ in range(MAX_RESAMPLE_RETRIES):
            idx = rng.integers(0, ds.n, size=ds.n)
            if observed[idx].any():
                break
        else:
            raise RuntimeError(f"replicate {j}: no observed responses after {MAX_RESAMPLE_RETRIES} redraws")
        if reuse_weights:
            raw = weights.raw[idx]
            v = raw / raw.sum()
        else:
            v = weight_fitter(ds.subset(idx)).normalized
        return _replicate_statistic(kx, ky, w, v, idx, base)

    reps = np.empty(m)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for j, val in enumerate(pool.map(one_replicate, range(m))):
                reps[j] = val
    else:
        for j in range(m):
            reps[j] = one_replicate(j)

    p_value = float(np.sum(reps >= stat)) / m
    return HsicResult(
        statistic=stat,
        replicates=reps,
        p_value=p_value,
        m=m,
        seed=seed,
        weights_ref=weights.provenance,
    )
