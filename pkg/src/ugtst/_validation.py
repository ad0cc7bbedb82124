"""Input validation helpers shared by the estimators."""
import numpy as np


def check_images(X) -> np.ndarray:
    """Validate a batch of images: (N, H, W), finite, H and W at least 3."""
    X = np.asarray(X)
    if X.ndim == 2:
        raise ValueError("expected a batch of images (N, H, W); wrap a single image as X[None]")
    if X.ndim != 3:
        raise ValueError(f"expected images of shape (N, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if X.shape[1] < 3 or X.shape[2] < 3:
        raise ValueError(f"images must be at least 3x3, got {X.shape[1:]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    return X


def check_targets(y, shape, num_classes) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise ValueError(f"targets shape {y.shape} does not match images {tuple(shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"targets must be integer class ids, got {y.dtype}")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"target classes must lie in [0, {num_classes - 1}]")
    return y


def check_prob_field(p, atol=1e-5) -> np.ndarray:
    """Validate a (C, H, W) probability field."""
    p = np.asarray(p)
    if p.ndim != 3 or p.shape[0] < 2:
        raise ValueError(f"expected a (C, H, W) probability field, got {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    if np.max(np.abs(p.sum(axis=0) - 1.0)) > atol:
        raise ValueError("class probabilities do not sum to one")
    return p
