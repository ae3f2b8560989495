"""Exceptions and input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class TerganError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 2
    kind = "runtime"


class ValidationError(TerganError, ValueError):
    exit_code = 1
    kind = "validation"


class ConfigurationError(ValidationError):
    kind = "configuration"


class DivergenceError(TerganError, RuntimeError):
    kind = "divergence"

    def __init__(self, term: str, value: float | None = None):
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term '{term}' (value={value})")


class IntegrityError(TerganError):
    exit_code = 3
    kind = "integrity"


class NotTrainedError(TerganError):
    kind = "not-trained"


def check_images(x, image_size: int | None = None, name: str = "images") -> np.ndarray:
    """Validate an image batch ``[batch, H, W, 3]`` with values in [0, 1].

    A single ``[H, W, 3]`` image is promoted to a batch of one.
    Returns a float32 array.
    """
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError(f"{name}: expected shape [batch, H, W, 3], got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValidationError(f"{name}: empty batch")
    if arr.shape[1] != arr.shape[2]:
        raise ValidationError(f"{name}: images must be square, got {arr.shape[1]}x{arr.shape[2]}")
    if image_size is not None and arr.shape[1] != image_size:
        raise ConfigurationError(
            f"{name}: image side {arr.shape[1]} does not match image_size {image_size}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite pixel values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(f"{name}: pixel values must lie in [0, 1]")
    return arr


def check_labels(y, n_classes: int, name: str = "labels") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValidationError(f"{name}: expected a 1-d label array, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.round(arr)):
            raise ValidationError(f"{name}: labels must be integers")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValidationError(f"{name}: values must lie in [0, {n_classes - 1}]")
    return arr
