"""Input validation helpers shared by the estimators and the data layer."""

from __future__ import annotations

import numpy as np


def as_float_matrix(x, name: str) -> np.ndarray:
    """Coerce to a finite 2-D float64 array or raise with the offending name."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite entries")
    return arr


def as_label_vector(y, name: str, n_rows: int | None = None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"{name}: expected a 1-D label array, got ndim={arr.ndim}")
    if not np.issubdtype(arr.dtype, np.integer):
        cast = arr.astype(np.int64)
        if not np.array_equal(cast, arr):
            raise ValueError(f"{name}: labels must be integers")
        arr = cast
    else:
        arr = arr.astype(np.int64)
    if n_rows is not None and arr.shape[0] != n_rows:
        raise ValueError(
            f"{name}: {arr.shape[0]} labels for {n_rows} rows"
        )
    return arr


def check_same_cols(a: np.ndarray, b: np.ndarray, name_a: str, name_b: str) -> None:
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"{name_a} and {name_b} disagree on feature dim: "
            f"{a.shape[1]} vs {b.shape[1]}"
        )


def check_positive(value, name: str) -> None:
    if not value > 0:
        raise ValueError(f"{name}: must be positive, got {value}")
