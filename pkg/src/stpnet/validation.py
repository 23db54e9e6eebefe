"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .textbank import CATEGORY_SIZES


def check_images(X, channels: int = 1, size: int = 64) -> np.ndarray:
    """Return ``X`` as float32 [N, C, H, W]; [N, H, W] is accepted for one channel."""
    X = np.asarray(X)
    if X.ndim == 3 and channels == 1:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1:] != (channels, size, size):
        raise InvalidArgumentError(f"expected images [N,{channels},{size},{size}], got {X.shape}")
    if X.shape[0] == 0:
        raise InvalidArgumentError("no images given")
    if not np.issubdtype(X.dtype, np.number) or np.issubdtype(X.dtype, np.complexfloating):
        raise InvalidArgumentError(f"images must be real numbers, got {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise InvalidArgumentError("images contain NaN or Inf")
    return X


def check_masks(y, n: int, size: int = 64) -> np.ndarray:
    """Return ``y`` as uint8 [N, 1, H, W] with values in {0, 1}."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[:, None]
    if y.shape != (n, 1, size, size):
        raise InvalidArgumentError(f"expected masks [{n},1,{size},{size}], got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise InvalidArgumentError("masks must be binary")
    return y.astype(np.uint8)


def check_labels(labels, n: int) -> np.ndarray:
    """Return ``labels`` as int64 [N, 4] within each category's range."""
    labels = np.asarray(labels)
    if labels.shape != (n, len(CATEGORY_SIZES)):
        raise InvalidArgumentError(f"expected labels [{n},{len(CATEGORY_SIZES)}], got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidArgumentError("labels must be integers")
    for c, k in enumerate(CATEGORY_SIZES):
        if labels[:, c].min() < 0 or labels[:, c].max() >= k:
            raise InvalidArgumentError(f"label column {c} outside 0..{k - 1}")
    return labels.astype(np.int64)
