"""Input validation helpers shared across the package.

Most public entry points funnel their array arguments through these helpers
so that shape and finiteness errors surface with a consistent message style
instead of a cryptic numpy broadcast failure three calls deeper.
"""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised when user-supplied data or configuration is malformed."""


def as_float_array(x, name: str, ndim: int | None = None, allow_nan: bool = False) -> np.ndarray:
    """Coerce to a float64 ndarray, optionally enforcing dimensionality."""
    try:
        arr = np.asarray(x, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name}: could not convert to a float array ({exc})") from exc
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not allow_nan and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite values")
    return arr


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite values")
    return arr


def check_shape(arr: np.ndarray, shape: tuple, name: str) -> np.ndarray:
    """Check shape against a template where None entries match anything."""
    if arr.ndim != len(shape):
        raise ValidationError(f"{name}: expected {len(shape)}-d array, got shape {arr.shape}")
    for got, want in zip(arr.shape, shape):
        if want is not None and got != want:
            raise ValidationError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def check_in_range(value: float, lo: float, hi: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or not (lo <= value <= hi):
        raise ValidationError(f"{name}: {value!r} outside allowed range [{lo}, {hi}]")
    return value


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
        raise ValidationError(f"{name}: expected a positive integer, got {value!r}")
    return int(value)


def check_binary_labels(y, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValidationError(f"{name}: expected 1-d label array, got shape {y.shape}")
    uniq = np.unique(y)
    if not np.all(np.isin(uniq, [0, 1])):
        raise ValidationError(f"{name}: labels must be binary 0/1, got values {uniq[:8]}")
    return y.astype(np.int64)
