"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X, image_shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Coerce to a float32 (N, H, W, C) array with pixels in [0, 1].

    Accepts (N, H, W) single-channel input and adds the channel axis.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, H, W, C), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image array")
    if float(X.min()) < 0.0 or float(X.max()) > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    if image_shape is not None and tuple(X.shape[1:]) != tuple(image_shape):
        raise ValueError(f"images have shape {X.shape[1:]}, expected {tuple(image_shape)}")
    return X


def check_labels(y, n_samples: int, n_classes: int | None = None) -> np.ndarray:
    """Coerce to an int array of shape (n_samples,), labels in [0, n_classes)."""
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"expected {n_samples} labels, got array of shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.rint(y)
        if not np.allclose(y, rounded):
            raise ValueError("labels must be integers")
        y = rounded
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be nonnegative")
    if n_classes is not None and y.max() >= n_classes:
        raise ValueError(f"labels must be < {n_classes}, found {int(y.max())}")
    return y
