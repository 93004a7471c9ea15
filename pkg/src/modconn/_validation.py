"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ShapeError


def check_images(X, channels: int | None = None, dtype=np.float32) -> np.ndarray:
    """Finite float array of shape (N, C, H, W) with square images."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_all_finite=True)
    if X.ndim != 4:
        raise ShapeError(f"expected images of shape (N, C, H, W), got an array with shape {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ShapeError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if channels is not None and X.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {X.shape[1]}")
    return np.ascontiguousarray(X)
