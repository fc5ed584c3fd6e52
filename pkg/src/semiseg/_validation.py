"""Input validation shared by the estimators."""
from __future__ import annotations

import numpy as np

UNLABELED = -1


def check_images(X) -> np.ndarray:
    """Return ``X`` as a finite float32 array of shape (N, C, H, W).

    Accepts (N, H, W), (N, C, H, W) or a sequence of equally sized images.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, H, W) or (N, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("need at least one image")
    if X.shape[1] not in (1, 3):
        raise ValueError(f"images must have 1 or 3 channels, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    return X


def check_masks(y, X: np.ndarray, allow_unlabeled: bool = False) -> np.ndarray:
    """Return ``y`` as int64 (N, H, W) aligned with ``X``.

    With ``allow_unlabeled`` a sample whose mask is entirely ``-1`` counts as
    unlabeled; partially labeled masks are rejected.
    """
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"masks must have shape {(X.shape[0],) + X.shape[2:]}, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("masks must hold integer class ids")
    y = y.astype(np.int64)
    neg = y < 0
    if neg.any():
        if not allow_unlabeled:
            raise ValueError("masks contain negative class ids")
        if (y[neg] != UNLABELED).any():
            raise ValueError(f"only {UNLABELED} may mark unlabeled samples")
        per_sample = neg.reshape(len(y), -1)
        partial = per_sample.any(axis=1) & ~per_sample.all(axis=1)
        if partial.any():
            raise ValueError(f"samples {np.flatnonzero(partial)[:5].tolist()} are partially labeled")
    return y


def labeled_indices(y: np.ndarray) -> np.ndarray:
    return np.flatnonzero((y != UNLABELED).reshape(len(y), -1).all(axis=1))
