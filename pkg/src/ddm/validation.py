"""Input validation helpers for image stacks."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from ddm.exceptions import DomainError, ShapeError


def check_images(X, *, unit_range=False, dtype=np.float64, allow_single=True) -> np.ndarray:
    """Validate an image stack and return it as a float ``(n, H, W)`` array.

    A single ``(H, W)`` image is promoted to a stack of one when
    ``allow_single`` is true. Non-finite values are rejected, and with
    ``unit_range`` so are values outside [0, 1].
    """
    X = np.asarray(X)
    if X.ndim == 2 and allow_single:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"expected an image stack (n, H, W), got shape {X.shape}")
    X = check_array(X, dtype=dtype, allow_nd=True, ensure_min_samples=1)
    if unit_range and X.size and (X.min() < -1e-12 or X.max() > 1 + 1e-12):
        raise DomainError("image values must lie in [0, 1]")
    return X


def check_pair(a, b, name_a="a", name_b="b"):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{name_a} {a.shape} and {name_b} {b.shape} differ")
    return a, b
