"""Input validation helpers for the estimator layer."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .patching import ImageGray


def as_image_list(x, image_size: int) -> list[ImageGray]:
    """Coerce an (M, H, W) array or a sequence of images to ImageGray objects."""
    if isinstance(x, np.ndarray):
        if x.ndim != 3:
            raise ConfigError(f"expected an (M, H, W) image stack, got shape {x.shape}")
        items: Sequence = list(x)
    else:
        items = list(x)
    if not items:
        raise ConfigError("empty image collection")
    images = []
    for item in items:
        img = item if isinstance(item, ImageGray) else ImageGray(np.asarray(item))
        if img.height != image_size or img.width != image_size:
            raise ConfigError(
                f"image {img.height}x{img.width} does not match configured side {image_size}"
            )
        images.append(img)
    return images


def check_feature_matrix(x, name: str = "X") -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"{name} must be a non-empty (M, D) matrix, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contains non-finite entries")
    return x


def check_labels(y, count: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != count:
        raise ContractError(f"labels must be a ({count},) vector, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise ContractError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ContractError("labels must be non-negative")
    return y


def unit_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize rows, rejecting rows with numerically zero norm."""
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    if np.any(norms < 1e-12):
        raise ContractError("cannot normalize a zero row")
    return (x / norms).astype(np.float32)
