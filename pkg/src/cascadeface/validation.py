"""Input validation helpers shared by the estimator API and the CLI."""

import numpy as np


def check_image(image):
    """Validate and return an (H, W, C) uint8 image; (H, W) input gains a
    channel axis."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ValueError(f"expected an (H, W[, C]) image, got shape {image.shape}")
    if image.shape[2] not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got {image.shape[2]}")
    if image.dtype != np.uint8:
        raise ValueError(f"image must be uint8, got dtype {image.dtype}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("image extents must be positive")
    return image


def check_images(X):
    """Accept one image or an iterable of images; returns (list, was_single)."""
    if isinstance(X, np.ndarray) and X.ndim in (2, 3):
        return [check_image(X)], True
    images = [check_image(img) for img in X]
    if not images:
        raise ValueError("no images supplied")
    return images, False


def check_windows(X, side=24):
    """Validate a (n, side, side) uint8 window stack."""
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[1:] != (side, side):
        raise ValueError(f"expected windows of shape (n, {side}, {side}), got {X.shape}")
    if X.dtype != np.uint8:
        raise ValueError(f"windows must be uint8, got dtype {X.dtype}")
    if len(X) == 0:
        raise ValueError("no windows supplied")
    return X


def check_labels(y, n):
    """Validate (n,) binary labels."""
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    y = y.astype(np.int64)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y


def check_thresholds(thresholds):
    t = tuple(float(v) for v in thresholds)
    if len(t) != 3 or not all(0.0 < v < 1.0 for v in t):
        raise ValueError("thresholds must be three values in (0, 1)")
    return t
