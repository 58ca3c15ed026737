"""Gaussian kernels over mixed data sources and their Gram matrices.

Each record may carry three sources: a distribution-valued covariate
(compared by the squared L2 distance between quantile functions), a
standardized numeric vector (squared Euclidean distance) and integer
categorical codes (disagreement count).  The global kernel is

    K(x, y) = exp(-(a*d_dist2/s_d^2 + b*d_num2/s_n^2 + c*d_cat2/s_c^2))

with nonnegative source weights (a, b, c) on the simplex a+b+c = 1.
Bandwidths come from the (optionally IPW-weighted) median heuristic with
a gamma-grid refinement s* = s**gamma.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset
from .weighted import weighted_median

_SIMPLEX_TOL = 1e-9
DEFAULT_GAMMA_GRID = tuple(np.arange(1, 13) * 0.25)
DEFAULT_SIMPLEX_STEP = 0.25


@dataclass(frozen=True)
class KernelSpec:
    """Bandwidths, simplex source weights and the gamma-grid exponent."""

    sigma_gluco: float = 1.0
    sigma_mult: float = 1.0
    sigma_categ: float = 1.0
    a: float = 0.0
    b: float = 1.0
    c: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("sigma_gluco", "sigma_mult", "sigma_categ"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if min(self.a, self.b, self.c) < 0.0:
            raise ValueError("simplex weights must be nonnegative")
        if abs(self.a + self.b + self.c - 1.0) > _SIMPLEX_TOL:
            raise ValueError("simplex weights must sum to 1")
        if not 0.0 < self.gamma <= 3.0:
            raise ValueError("gamma must lie in (0, 3]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str | Path) -> "KernelSpec":
        if isinstance(text, Path):
            text = text.read_text()
        return cls(**json.loads(text))


@dataclass(frozen=True)
class GramMatrix:
    """Symmetric PSD kernel evaluations with the parameters that produced them."""

    values: np.ndarray
    spec: KernelSpec

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("Gram matrix must be square")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _sym(d2: np.ndarray) -> np.ndarray:
    d2 = np.maximum(d2, 0.0)
    d2 = 0.5 * (d2 + d2.T)
    np.fill_diagonal(d2, 0.0)
    return d2


def _sq_from_inner(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    sx = np.einsum("ij,ij->i", x, x)
    if y is None:
        d2 = sx[:, None] + sx[None, :] - 2.0 * (x @ x.T)
        return _sym(d2)
    sy = np.einsum("ij,ij->i", y, y)
    return np.maximum(sx[:, None] + sy[None, :] - 2.0 * (x @ y.T), 0.0)


def numeric_sq_distances(ds: Dataset, other: Dataset | None = None) -> np.ndarray:
    x = ds.numeric
    y = other.numeric if other is not None else None
    if x.shape[1] == 0:
        m = other.n if other is not None else ds.n
        return np.zeros((ds.n, m))
    return _sq_from_inner(x, y)


def gluco_sq_distances(ds: Dataset, other: Dataset | None = None) -> np.ndarray:
    """Squared L2 distance between quantile functions on the shared grid.

    The grid is equally spaced, so the integral is the mean of squared
    value differences.
    """
    q1 = ds.quantile_matrix()
    m = q1.shape[1]
    if other is None:
        return _sq_from_inner(q1 / np.sqrt(m))
    q2 = other.quantile_matrix()
    if q2.shape[1] != m or not np.array_equal(ds.distributional[0].grid, other.distributional[0].grid):
        raise ValueError("datasets must share one quantile grid")
    return _sq_from_inner(q1 / np.sqrt(m), q2 / np.sqrt(m))


def categ_sq_distances(ds: Dataset, other: Dataset | None = None) -> np.ndarray:
    c1 = ds.categorical
    c2 = other.categorical if other is not None else c1
    out = np.zeros((c1.shape[0], c2.shape[0]))
    for j in range(c1.shape[1]):
        out += (c1[:, j][:, None] != c2[:, j][None, :]).astype(float)
    return out


def source_distances(ds: Dataset, i: int, j: int) -> tuple[float, float, float]:
    """Per-source squared distances (distributional, numeric, categorical)."""
    d_num = float(np.sum((ds.numeric[i] - ds.numeric[j]) ** 2))
    d_cat = float(np.sum(ds.categorical[i] != ds.categorical[j]))
    if ds.has_distributional:
        qi, qj = ds.distributional[i], ds.distributional[j]
        d_glu = float(np.mean((qi.values - qj.values) ** 2))
    else:
        d_glu = 0.0
    return d_glu, d_num, d_cat


def _combined_exponent(ds: Dataset, spec: KernelSpec, other: Dataset | None = None) -> np.ndarray:
    if spec.a > 0.0 and not ds.has_distributional:
        raise ValueError("spec puts weight a > 0 on a missing distributional block")
    e = np.zeros((ds.n, other.n if other is not None else ds.n))
    if spec.a > 0.0:
        e += spec.a / spec.sigma_gluco**2 * gluco_sq_distances(ds, other)
    if spec.b > 0.0:
        e += spec.b / spec.sigma_mult**2 * numeric_sq_distances(ds, other)
    if spec.c > 0.0:
        e += spec.c / spec.sigma_categ**2 * categ_sq_distances(ds, other)
    return e


def gram(ds: Dataset, spec: KernelSpec) -> GramMatrix:
    """Gram matrix of the global Gaussian kernel over one dataset."""
    k = np.exp(-_combined_exponent(ds, spec))
    np.fill_diagonal(k, 1.0)
    return GramMatrix(values=k, spec=spec)


def cross_gram(ds: Dataset, other: Dataset, spec: KernelSpec) -> np.ndarray:
    """Kernel evaluations between the records of two datasets (n1 x n2)."""
    return np.exp(-_combined_exponent(ds, spec, other))


def gaussian_gram_1d(values: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian Gram matrix exp(-(v_i - v_j)^2 / sigma^2) for a real vector."""
    if sigma <= 0.0:
        raise ValueError("sigma must be strictly positive")
    v = np.asarray(values, dtype=float)
    k = np.exp(-((v[:, None] - v[None, :]) ** 2) / sigma**2)
    np.fill_diagonal(k, 1.0)
    return k


def _upper_pairs(d2: np.ndarray) -> np.ndarray:
    iu = np.triu_indices(d2.shape[0], k=1)
    return d2[iu]


def pair_masses(record_weights: np.ndarray) -> np.ndarray:
    """Masses w_i * w_j over pairs i < j, aligned with :func:`_upper_pairs`."""
    w = np.asarray(record_weights, dtype=float)
    outer = w[:, None] * w[None, :]
    return _upper_pairs(outer)


def median_heuristic(sq_distances: np.ndarray, masses: np.ndarray | None = None) -> float:
    """Bandwidth sqrt(median of pairwise squared distances).

    With ``masses`` the median is the weighted 0.5-quantile, the IPW form
    of the heuristic; equal masses reduce exactly to the unweighted case
    (lower-median convention).  If the median lands on zero while positive
    distances exist, the median of the positive part is used instead so
    the bandwidth stays valid for a Gaussian kernel.
    """
    d2 = np.asarray(sq_distances, dtype=float).ravel()
    if d2.size == 0:
        raise ValueError("no pairwise distances")
    if masses is None:
        masses = np.ones_like(d2)
    masses = np.asarray(masses, dtype=float).ravel()
    positive = d2 > 0.0
    if not positive.any():
        raise ValueError("all pairwise distances are zero; data degenerate for a Gaussian kernel")
    if masses[positive].sum() <= 0.0:
        raise ValueError("no positive-distance pair carries weight")
    med = weighted_median(d2, masses)
    if med <= 0.0:
        med = weighted_median(d2[positive], masses[positive])
    return float(np.sqrt(med))


def per_source_sigmas(ds: Dataset, record_weights: np.ndarray | None = None) -> dict[str, float]:
    """Median-heuristic bandwidth per data source (1.0 for absent sources)."""
    masses = pair_masses(record_weights) if record_weights is not None else None
    out = {"sigma_gluco": 1.0, "sigma_mult": 1.0, "sigma_categ": 1.0}
    if ds.has_distributional:
        out["sigma_gluco"] = median_heuristic(_upper_pairs(gluco_sq_distances(ds)), masses)
    if ds.p_num:
        out["sigma_mult"] = median_heuristic(_upper_pairs(numeric_sq_distances(ds)), masses)
    if ds.p_cat:
        out["sigma_categ"] = median_heuristic(_upper_pairs(categ_sq_distances(ds)), masses)
    return out


def simplex_lattice(step: float = DEFAULT_SIMPLEX_STEP) -> list[tuple[float, float, float]]:
    """Barycentric lattice of (a, b, c) weights in lexicographic order."""
    k = int(round(1.0 / step))
    if abs(k * step - 1.0) > 1e-12:
        raise ValueError("step must divide 1 evenly")
    pts = []
    for i, j in itertools.product(range(k + 1), repeat=2):
        if i + j <= k:
            pts.append((i / k, j / k, (k - i - j) / k))
    return sorted(pts)


def tune_spec(
    ds: Dataset,
    record_weights: np.ndarray | None,
    objective: Callable[[KernelSpec], float],
    gamma_grid: Sequence[float] | None = None,
    simplex_grid: Sequence[tuple[float, float, float]] | None = None,
) -> KernelSpec:
    """Exhaustive kernel tuning over the gamma grid and the simplex grid.

    Per-source base bandwidths come from the median heuristic (weighted by
    the record weights when given); candidate specs use sigma**gamma for
    every source.  Simplex points putting weight on an absent source are
    skipped.  The argmin of ``objective`` is returned; on ties the earlier
    candidate wins, with candidates ordered by gamma then lexicographic
    (a, b, c).  Candidates where the objective raises are skipped.
    """
    gammas = tuple(gamma_grid) if gamma_grid is not None else DEFAULT_GAMMA_GRID
    simplex = list(simplex_grid) if simplex_grid is not None else simplex_lattice()
    base = per_source_sigmas(ds, record_weights)
    allowed = []
    for (a, b, c) in sorted(simplex):
        if a > 0.0 and not ds.has_distributional:
            continue
        if b > 0.0 and ds.p_num == 0:
            continue
        if c > 0.0 and ds.p_cat == 0:
            continue
        allowed.append((a, b, c))
    if not allowed:
        raise ValueError("no simplex point is compatible with the dataset's sources")

    best: tuple[float, KernelSpec] | None = None
    failures: list[str] = []
    for g in sorted(gammas):
        cand_sigmas = {k: v**g for k, v in base.items()}
        for (a, b, c) in allowed:
            spec = KernelSpec(
                sigma_gluco=cand_sigmas["sigma_gluco"],
                sigma_mult=cand_sigmas["sigma_mult"],
                sigma_categ=cand_sigmas["sigma_categ"],
                a=a,
                b=b,
                c=c,
                gamma=g,
            )
            try:
                score = float(objective(spec))
            except Exception as exc:  # noqa: BLE001 - objective failures are skipped, not fatal
                failures.append(f"gamma={g} (a,b,c)=({a},{b},{c}): {exc}")
                continue
            if np.isnan(score):
                failures.append(f"gamma={g} (a,b,c)=({a},{b},{c}): NaN score")
                continue
            if best is None or score < best[0]:
                best = (score, spec)
    if best is None:
        detail = "; ".join(failures[:3])
        raise RuntimeError(f"objective failed on every grid point ({detail})")
    return best[1]
