import numpy as np
import pytest

from rkhsmiss.dataset import Dataset


def numeric_dataset(x, y=None, mask=None):
    """Dataset over a numeric block, treated as already standardized."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 1 and x.shape[1] > 1 and x.ndim == 2:
        x = x.T if x.shape[0] == 1 else x
    n = x.shape[0]
    if y is None:
        y = np.zeros(n)
    y = np.asarray(y, dtype=float)
    if mask is None:
        mask = np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    return Dataset(
        numeric=x,
        categorical=np.zeros((n, 0), dtype=np.int64),
        response=np.where(mask, y, np.nan),
        mask=mask,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
