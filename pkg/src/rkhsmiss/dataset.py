"""In-memory representation of mixed-type datasets with missing responses.

A dataset holds three covariate blocks (standardized numeric columns,
integer-coded categorical columns, and optional per-record quantile
functions summarizing a distribution-valued covariate), a real response
vector and a boolean observation mask.  Covariates are always fully
observed; only the response may be missing.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

VALID_ROLES = ("numeric", "categorical", "response", "id")
DEFAULT_NA_TOKENS = ("", "NA")
DEFAULT_GRID_SIZE = 100


class SchemaError(ValueError):
    """Raised when a column-role schema or a data file violates it."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def midpoint_grid(m: int) -> np.ndarray:
    """Equally spaced probabilities (k - 1/2)/m for k = 1..m."""
    return (np.arange(1, m + 1) - 0.5) / m


@dataclass(frozen=True)
class QuantileFunction:
    """Discretized monotone quantile curve of a time-occupancy distribution.

    ``grid`` holds m strictly increasing probabilities in (0, 1) and
    ``values`` the corresponding non-decreasing quantiles.
    """

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = _frozen(np.asarray(self.grid, dtype=float))
        values = _frozen(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        if grid.ndim != 1 or values.ndim != 1 or len(grid) != len(values):
            raise ValueError("grid and values must be 1-d with equal length")
        if len(grid) < 2:
            raise ValueError("quantile function needs at least 2 grid points")
        if not (np.all(grid > 0.0) and np.all(grid < 1.0)):
            raise ValueError("grid probabilities must lie strictly in (0, 1)")
        if not np.all(np.diff(grid) > 0.0):
            raise ValueError("grid must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("quantile values must be finite")
        if np.any(np.diff(values) < 0.0):
            raise ValueError("quantile values must be non-decreasing")

    @property
    def size(self) -> int:
        return len(self.grid)

    def mean(self) -> float:
        """Mean of the underlying distribution (uniform-grid average)."""
        return float(np.mean(self.values))

    def std(self) -> float:
        return float(np.std(self.values))


def cgm_to_quantile(readings: Iterable, m: int = DEFAULT_GRID_SIZE) -> QuantileFunction:
    """Reduce a monitoring stream to its empirical quantile function.

    ``readings`` may be bare glucose values or (timestamp, glucose) pairs;
    timestamps are ignored because the representation is the marginal
    time-occupancy distribution.  The empirical quantile is evaluated at
    the midpoint grid p_k = (k - 1/2)/m by linear interpolation between
    order statistics placed at the plotting positions (j - 1/2)/n, so a
    sample of exactly m readings maps to its sorted values unchanged.
    """
    vals = []
    for r in readings:
        g = r[1] if isinstance(r, (tuple, list)) else r
        g = float(g)
        if math.isfinite(g):
            vals.append(g)
    if m < 2:
        raise ValueError("grid size m must be at least 2")
    if len(vals) < m:
        raise ValueError(f"need at least m={m} finite readings, got {len(vals)}")
    x = np.sort(np.asarray(vals, dtype=float))
    n = len(x)
    grid = midpoint_grid(m)
    positions = grid * n + 0.5  # 1-based fractional order-statistic index
    values = np.interp(positions, np.arange(1, n + 1), x)
    values = np.maximum.accumulate(values)
    return QuantileFunction(grid=grid, values=values)


@dataclass(frozen=True)
class SplitIndex:
    """Disjoint training/test index partition of 0..n-1."""

    training: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self):
        tr = _frozen(np.asarray(self.training, dtype=np.intp))
        te = _frozen(np.asarray(self.test, dtype=np.intp))
        object.__setattr__(self, "training", tr)
        object.__setattr__(self, "test", te)
        n = len(tr) + len(te)
        combined = np.concatenate([tr, te])
        if len(tr) == 0 or len(te) == 0:
            raise ValueError("both split sides must be nonempty")
        if not np.array_equal(np.sort(combined), np.arange(n)):
            raise ValueError("training and test must partition 0..n-1")


@dataclass(frozen=True)
class Dataset:
    """Immutable mixed-covariate sample with a partially observed response.

    ``numeric`` is stored standardized (zero mean, unit variance over all
    rows); the pre-standardization statistics are kept so raw values can
    be recovered.  ``response`` is stored standardized over its observed
    entries and is NaN where ``mask`` is False; use :meth:`response_value`
    for checked access.
    """

    numeric: np.ndarray
    categorical: np.ndarray
    response: np.ndarray
    mask: np.ndarray
    distributional: tuple[QuantileFunction, ...] | None = None
    numeric_names: tuple[str, ...] = ()
    categorical_names: tuple[str, ...] = ()
    cardinalities: tuple[int, ...] = ()
    categories: tuple[tuple[str, ...], ...] = ()
    ids: tuple[str, ...] = ()
    numeric_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    numeric_scale: np.ndarray = field(default_factory=lambda: np.ones(0))
    response_mean: float = 0.0
    response_scale: float = 1.0
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        num = _frozen(np.asarray(self.numeric, dtype=float))
        cat = _frozen(np.asarray(self.categorical, dtype=np.int64))
        resp = _frozen(np.asarray(self.response, dtype=float))
        mask = _frozen(np.asarray(self.mask, dtype=bool))
        if num.ndim != 2 or cat.ndim != 2:
            raise ValueError("numeric and categorical blocks must be 2-d")
        n = num.shape[0]
        if cat.shape[0] != n or len(resp) != n or len(mask) != n:
            raise ValueError("all blocks must have the same number of rows")
        object.__setattr__(self, "numeric", num)
        object.__setattr__(self, "categorical", cat)
        object.__setattr__(self, "response", resp)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "numeric_mean", _frozen(np.asarray(self.numeric_mean, dtype=float)))
        object.__setattr__(self, "numeric_scale", _frozen(np.asarray(self.numeric_scale, dtype=float)))
        if not self.numeric_names:
            object.__setattr__(self, "numeric_names", tuple(f"x{j}" for j in range(num.shape[1])))
        if not self.categorical_names:
            object.__setattr__(self, "categorical_names", tuple(f"c{j}" for j in range(cat.shape[1])))
        if len(self.numeric_mean) != num.shape[1]:
            object.__setattr__(self, "numeric_mean", _frozen(np.zeros(num.shape[1])))
            object.__setattr__(self, "numeric_scale", _frozen(np.ones(num.shape[1])))
        if not self.cardinalities:
            card = tuple(int(cat[:, j].max()) + 1 if n else 1 for j in range(cat.shape[1]))
            object.__setattr__(self, "cardinalities", card)
        for j, c in enumerate(self.cardinalities):
            col = cat[:, j]
            if col.size and (col.min() < 0 or col.max() >= c):
                raise ValueError(f"categorical column {j} has codes outside 0..{c - 1}")
        if self.distributional is not None:
            qfs = tuple(self.distributional)
            if len(qfs) != n:
                raise ValueError("distributional block must have one record per row")
            g0 = qfs[0].grid
            for q in qfs[1:]:
                if not np.array_equal(q.grid, g0):
                    raise ValueError("all quantile functions must share one grid")
            object.__setattr__(self, "distributional", qfs)
        if np.any(np.isfinite(resp[~mask])):
            raise ValueError("response must be NaN where the mask is False")
        if np.any(~np.isfinite(resp[mask])):
            raise ValueError("observed responses must be finite")

    @property
    def n(self) -> int:
        return self.numeric.shape[0]

    @property
    def p_num(self) -> int:
        return self.numeric.shape[1]

    @property
    def p_cat(self) -> int:
        return self.categorical.shape[1]

    @property
    def has_distributional(self) -> bool:
        return self.distributional is not None

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def response_value(self, i: int) -> float:
        """Standardized response of record ``i``; raises if unobserved."""
        if not self.mask[i]:
            raise ValueError(f"response of record {i} is unobserved")
        return float(self.response[i])

    def observed_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def response_filled(self, fill: float = 0.0) -> np.ndarray:
        """Standardized response with ``fill`` in place of missing entries."""
        out = self.response.copy()
        out[~self.mask] = fill
        return out

    def raw_response(self) -> np.ndarray:
        """Response in original units, NaN where unobserved."""
        return self.response * self.response_scale + self.response_mean

    def destandardize_response(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * self.response_scale + self.response_mean

    def raw_numeric(self) -> np.ndarray:
        """Numeric block in original units."""
        return self.numeric * self.numeric_scale + self.numeric_mean

    def quantile_matrix(self) -> np.ndarray:
        """Stacked quantile values, one row per record."""
        if self.distributional is None:
            raise ValueError("dataset has no distributional block")
        return np.vstack([q.values for q in self.distributional])

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        """Row subset sharing this dataset's standardization statistics."""
        idx = np.asarray(indices, dtype=np.intp)
        dist = None
        if self.distributional is not None:
            dist = tuple(self.distributional[int(i)] for i in idx)
        ids = tuple(self.ids[int(i)] for i in idx) if self.ids else ()
        return Dataset(
            numeric=self.numeric[idx],
            categorical=self.categorical[idx],
            response=self.response[idx],
            mask=self.mask[idx],
            distributional=dist,
            numeric_names=self.numeric_names,
            categorical_names=self.categorical_names,
            cardinalities=self.cardinalities,
            categories=self.categories,
            ids=ids,
            numeric_mean=self.numeric_mean,
            numeric_scale=self.numeric_scale,
            response_mean=self.response_mean,
            response_scale=self.response_scale,
            warnings=self.warnings,
        )

    def fingerprint(self) -> str:
        """Stable content hash used to tag fitted models."""
        import hashlib

        h = hashlib.sha256()
        for a in (self.numeric, self.categorical, self.mask, self.response_filled(0.0)):
            h.update(np.ascontiguousarray(a).tobytes())
        if self.distributional is not None:
            h.update(self.quantile_matrix().tobytes())
            h.update(self.distributional[0].grid.tobytes())
        return h.hexdigest()[:16]


def split(ds: Dataset, fraction: float, seed: int) -> SplitIndex:
    """Uniform random split without replacement; deterministic given seed."""
    if ds.n < 4:
        raise ValueError("need at least 4 records to split")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n1 = int(round(fraction * ds.n))
    if n1 == 0 or n1 == ds.n:
        raise ValueError(f"fraction {fraction} leaves one side of the split empty")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return SplitIndex(training=np.sort(perm[:n1]), test=np.sort(perm[n1:]), seed=seed)


def parse_schema(schema: Mapping[str, str] | str | Path) -> dict[str, str]:
    """Load and validate a column-role mapping (JSON file or dict)."""
    if isinstance(schema, (str, Path)):
        with open(schema, "r", encoding="utf-8") as fh:
            schema = json.load(fh)
    if not isinstance(schema, Mapping):
        raise SchemaError("schema must map column names to roles")
    out = {}
    for col, role in schema.items():
        if role not in VALID_ROLES:
            raise SchemaError(f"unknown role {role!r} for column {col!r}")
        out[str(col)] = role
    n_resp = sum(1 for r in out.values() if r == "response")
    if n_resp != 1:
        raise SchemaError(f"schema must declare exactly one response column, found {n_resp}")
    if sum(1 for r in out.values() if r == "id") > 1:
        raise SchemaError("schema may declare at most one id column")
    return out


def _read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, header required") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append(row)
    return header, rows


def load_cgm_streams(path: str | Path) -> dict[str, list[float]]:
    """Read a long-format (subject_id, timestamp, glucose) CSV into streams."""
    header, rows = _read_csv(path)
    cols = {name: k for k, name in enumerate(header)}
    for required in ("subject_id", "glucose"):
        if required not in cols:
            raise SchemaError(f"CGM file must have a {required!r} column")
    streams: dict[str, list[float]] = {}
    for row in rows:
        sid = row[cols["subject_id"]]
        try:
            g = float(row[cols["glucose"]])
        except ValueError:
            raise ValueError(f"non-numeric glucose value {row[cols['glucose']]!r} for subject {sid}") from None
        streams.setdefault(sid, []).append(g)
    return streams


def load_dataset(
    path: str | Path,
    schema: Mapping[str, str] | str | Path,
    *,
    na_tokens: Sequence[str] = DEFAULT_NA_TOKENS,
    cgm_path: str | Path | None = None,
    grid_size: int = DEFAULT_GRID_SIZE,
    like: Dataset | None = None,
) -> Dataset:
    """Load a CSV of covariates and a partially observed response.

    ``schema`` assigns each used column a role among numeric, categorical,
    response and id.  The response is taken as missing where its field is
    one of ``na_tokens``.  Numeric columns are standardized over all rows
    and zero-variance columns are dropped with a warning record.  When
    ``cgm_path`` is given, each record's id must have a stream in that
    file; streams become quantile-function covariates on a shared grid.
    When ``like`` is given, standardization statistics, category codes and
    dropped columns are taken from the reference dataset so that query
    records live in the training coordinate system.
    """
    roles = parse_schema(schema)
    header, rows = _read_csv(path)
    missing_cols = [c for c in roles if c not in header]
    if missing_cols:
        raise SchemaError(f"columns {missing_cols} declared in schema but absent from {path}")
    col_of = {name: k for k, name in enumerate(header)}
    numeric_cols = [c for c in header if roles.get(c) == "numeric"]
    categorical_cols = [c for c in header if roles.get(c) == "categorical"]
    response_col = next(c for c, r in roles.items() if r == "response")
    id_col = next((c for c, r in roles.items() if r == "id"), None)

    na = set(na_tokens)
    n = len(rows)
    if n == 0:
        raise ValueError(f"{path}: no data rows")

    ids = tuple(r[col_of[id_col]] for r in rows) if id_col else tuple(str(i) for i in range(n))

    raw_num = np.empty((n, len(numeric_cols)))
    for j, c in enumerate(numeric_cols):
        k = col_of[c]
        for i, row in enumerate(rows):
            tok = row[k].strip()
            try:
                raw_num[i, j] = float(tok)
            except ValueError:
                raise ValueError(f"{path}: non-numeric token {tok!r} in numeric column {c!r}, row {i + 2}") from None
        if not np.all(np.isfinite(raw_num[:, j])):
            raise ValueError(f"{path}: non-finite value in numeric column {c!r}")

    warnings_out: list[str] = []
    if like is None:
        mean = raw_num.mean(axis=0) if n else np.zeros(len(numeric_cols))
        sd = raw_num.std(axis=0)
        keep = sd > 0.0
        for j, c in enumerate(numeric_cols):
            if not keep[j]:
                warnings_out.append(f"numeric column {c!r} is constant at {raw_num[0, j]:g}; dropped")
        kept_names = tuple(c for j, c in enumerate(numeric_cols) if keep[j])
        mean, sd, raw_num = mean[keep], sd[keep], raw_num[:, keep]
    else:
        kept_names = like.numeric_names
        positions = []
        for c in kept_names:
            if c not in numeric_cols:
                raise SchemaError(f"reference dataset expects numeric column {c!r}")
            positions.append(numeric_cols.index(c))
        raw_num = raw_num[:, positions]
        mean, sd = like.numeric_mean, like.numeric_scale
    numeric = (raw_num - mean) / sd if raw_num.shape[1] else raw_num

    cat = np.zeros((n, len(categorical_cols)), dtype=np.int64)
    categories: list[tuple[str, ...]] = []
    for j, c in enumerate(categorical_cols):
        k = col_of[c]
        column = [row[k].strip() for row in rows]
        if like is None:
            levels = tuple(sorted(set(column)))
        else:
            if c not in like.categorical_names:
                raise SchemaError(f"reference dataset has no categorical column {c!r}")
            levels = like.categories[like.categorical_names.index(c)]
        lut = {lev: code for code, lev in enumerate(levels)}
        for i, tok in enumerate(column):
            if tok not in lut:
                raise SchemaError(f"{path}: unseen category {tok!r} in column {c!r}, row {i + 2}")
            cat[i, j] = lut[tok]
        categories.append(levels)

    resp_raw = np.full(n, np.nan)
    mask = np.zeros(n, dtype=bool)
    k = col_of[response_col]
    for i, row in enumerate(rows):
        tok = row[k].strip()
        if tok in na:
            continue
        try:
            resp_raw[i] = float(tok)
        except ValueError:
            raise ValueError(f"{path}: non-numeric response {tok!r} in row {i + 2}") from None
        mask[i] = True

    if like is None:
        if not mask.any():
            raise ValueError(f"{path}: all responses missing; cannot standardize")
        r_mean = float(resp_raw[mask].mean())
        r_scale = float(resp_raw[mask].std())
        if r_scale == 0.0:
            warnings_out.append("observed responses are constant; response left unscaled")
            r_scale = 1.0
    else:
        r_mean, r_scale = like.response_mean, like.response_scale
    response = np.where(mask, (resp_raw - r_mean) / r_scale, np.nan)

    distributional = None
    if cgm_path is not None:
        streams = load_cgm_streams(cgm_path)
        qfs = []
        for sid in ids:
            if sid not in streams:
                raise ValueError(f"no CGM stream for subject {sid!r} in {cgm_path}")
            qfs.append(cgm_to_quantile(streams[sid], m=grid_size))
        distributional = tuple(qfs)

    card = tuple(len(levels) for levels in categories)
    return Dataset(
        numeric=numeric,
        categorical=cat,
        response=response,
        mask=mask,
        distributional=distributional,
        numeric_names=kept_names,
        categorical_names=tuple(categorical_cols),
        cardinalities=card,
        categories=tuple(categories),
        ids=ids,
        numeric_mean=mean,
        numeric_scale=sd,
        response_mean=r_mean,
        response_scale=r_scale,
        warnings=tuple(warnings_out),
    )
