"""Weighted discrete quantiles shared by bandwidth selection and conformal intervals."""

from __future__ import annotations

import numpy as np

# absorbs float dust when a cumulative mass should hit the level exactly
_CUM_TOL = 1e-12


def weighted_quantile(values: np.ndarray, masses: np.ndarray, q: float) -> float:
    """Smallest atom whose cumulative mass reaches ``q``.

    Atoms are sorted ascending and ties share their summed mass, so the
    result is deterministic.  Masses need not be normalized; they must be
    nonnegative with a positive total.  ``values`` may contain ``inf``.
    """
    values = np.asarray(values, dtype=float)
    masses = np.asarray(masses, dtype=float)
    if values.shape != masses.shape or values.ndim != 1:
        raise ValueError("values and masses must be 1-d of equal length")
    if np.any(masses < 0.0) or not np.all(np.isfinite(masses)):
        raise ValueError("masses must be finite and nonnegative")
    total = masses.sum()
    if total <= 0.0:
        raise ValueError("total mass must be positive")
    if not 0.0 < q <= 1.0:
        raise ValueError("quantile level must lie in (0, 1]")
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(masses[order]) / total
    idx = int(np.searchsorted(cum, q - _CUM_TOL, side="left"))
    idx = min(idx, len(values) - 1)
    return float(values[order][idx])


def weighted_median(values: np.ndarray, masses: np.ndarray | None = None) -> float:
    """0.5-quantile under :func:`weighted_quantile`'s lower-atom convention.

    With uniform masses this is the lower median of the multiset, which
    keeps the weighted and unweighted paths exactly consistent.
    """
    values = np.asarray(values, dtype=float)
    if masses is None:
        masses = np.ones_like(values)
    return weighted_quantile(values, masses, 0.5)
