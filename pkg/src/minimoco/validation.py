"""Input validation helpers shared by the estimator API."""

from __future__ import annotations

import numpy as np

__all__ = ["check_feature_matrix", "check_images", "check_masks"]


def check_feature_matrix(X, name: str = "X") -> np.ndarray:
    """Validate a 2-D finite float matrix [n_samples, n_features]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D [n_samples, n_features], got shape {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or Inf")
    return X


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate a stack of images [n, C, H, W] with finite values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:  # single image
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"{name} must be [n, C, H, W] images, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1], got range "
                         f"[{X.min():.4f}, {X.max():.4f}]")
    return X


def check_masks(y, images: np.ndarray, name: str = "y") -> np.ndarray:
    """Validate integer masks [n, H, W] aligned with ``images``."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError(f"{name} must be [n, H, W] integer masks, got shape {y.shape}")
    if y.shape[0] != images.shape[0] or y.shape[1:] != images.shape[2:]:
        raise ValueError(
            f"{name} shape {y.shape} does not align with images {images.shape}"
        )
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"{name} must have an integer dtype, got {y.dtype}")
    if y.min() < 0:
        raise ValueError(f"{name} contains negative class ids")
    return y.astype(np.uint8)
