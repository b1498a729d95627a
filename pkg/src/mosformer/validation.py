"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

from typing import List, Sequence, Union

import numpy as np

from .exceptions import DataError, DimensionError, InputError


def check_volume(volume, in_channels: int = 1, multiple: int = 16) -> np.ndarray:
    """Coerce to a finite float C×H×W×D array; H×W×D gains a channel axis."""
    arr = np.asarray(volume)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"volume must be H×W×D or C×H×W×D, got shape {arr.shape}")
    if arr.shape[0] != in_channels:
        raise DimensionError(f"volume has {arr.shape[0]} channels, expected {in_channels}")
    if arr.shape[-1] < 1:
        raise DimensionError("volume has no slices")
    if arr.shape[1] % multiple or arr.shape[2] % multiple:
        raise DimensionError(f"in-plane size {arr.shape[1:3]} must be a multiple of {multiple}")
    if not np.issubdtype(arr.dtype, np.number):
        raise InputError(f"volume dtype {arr.dtype} is not numeric")
    if not np.all(np.isfinite(arr)):
        raise InputError("volume contains NaN or inf")
    return arr if np.issubdtype(arr.dtype, np.floating) else arr.astype(np.float32)


def check_labels(labels, shape, n_classes: int) -> np.ndarray:
    """Integer H×W×D label map matching ``shape`` with values in ``[0, n_classes)``."""
    arr = np.asarray(labels)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.shape != tuple(shape):
        raise DimensionError(f"labels {arr.shape} do not match image grid {tuple(shape)}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise DataError("labels must be integers")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes})")
    return arr.astype(np.int64, copy=False)


def as_volume_list(X) -> List:
    """A single 3-D/4-D array becomes a one-element list."""
    if isinstance(X, np.ndarray) and X.ndim in (3, 4) and X.dtype != object:
        return [X]
    if isinstance(X, (list, tuple)):
        return list(X)
    raise InputError("expected an array volume or a sequence of volumes")
