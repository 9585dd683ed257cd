"""Input validation helpers for the array-based estimator API."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length, column_or_1d

from .dataset import Dataset
from .exceptions import DataError


def check_grid(grid) -> np.ndarray:
    g = np.atleast_1d(np.asarray(grid, dtype=float))
    if g.ndim != 1:
        raise ValueError("quantile grid must be one-dimensional")
    if np.any(g <= 0) or np.any(g >= 1):
        raise ValueError("quantile levels must lie in (0, 1)")
    if g.size > 1 and np.any(np.diff(g) <= 0):
        raise ValueError("quantile grid must be strictly increasing")
    return g


def parse_grid(spec: str) -> np.ndarray:
    """``"lo:hi:step"`` (inclusive of ``hi`` up to rounding) or a comma list."""
    spec = spec.strip()
    if ":" in spec:
        lo, hi, step = (float(s) for s in spec.split(":"))
        if step <= 0 or hi < lo:
            raise ValueError(f"invalid grid spec {spec!r}")
        m = int(np.floor((hi - lo) / step + 1e-9)) + 1
        g = np.round(lo + step * np.arange(m), 10)
    else:
        g = np.array([float(s) for s in spec.split(",") if s.strip()])
    return check_grid(g)


def check_binary(v, name: str) -> np.ndarray:
    a = column_or_1d(np.asarray(v, dtype=float))
    if not np.all((a == 0) | (a == 1)):
        raise DataError(f"{name} must be coded 0/1", column=name)
    return a


def as_dataset(X, y, treatment, instrument=None) -> Dataset:
    """Validate arrays and bundle them; a missing instrument is set to the treatment."""
    y = column_or_1d(np.asarray(y, dtype=float))
    n = y.shape[0]
    if X is None:
        X = np.empty((n, 0))
    X = check_array(X, ensure_min_features=0, ensure_2d=True, dtype=float)
    d = check_binary(treatment, "d")
    z = d if instrument is None else check_binary(instrument, "z")
    check_consistent_length(X, y, d, z)
    return Dataset(y, d, z, X)
