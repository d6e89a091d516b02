"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numbers

import numpy as np


def check_images(X, name="X") -> np.ndarray:
    """``(n, H, W)`` float32 images in [0, 1]; a single ``(H, W)`` image is promoted."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty (n, H, W) array, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]; window raw data first")
    return X


def check_masks(y, X: np.ndarray, name="y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != X.shape:
        raise ValueError(f"{name} shape {y.shape} does not match images {X.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return y.astype(np.uint8)


def check_positive(value, name, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if not isinstance(value, kind) or isinstance(value, bool) or not value > 0:
        raise ValueError(f"{name} must be a positive {'integer' if integer else 'number'}, got {value!r}")
    return value


def check_is_fitted(estimator, attr="params_"):
    if getattr(estimator, attr, None) is None:
        raise RuntimeError(f"{type(estimator).__name__} is not fitted yet; call fit first")
