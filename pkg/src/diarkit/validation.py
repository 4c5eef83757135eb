"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_frame_matrix(x, num_bins: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce one recording's features to a float32 T x F matrix."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D frame-feature matrix, got {arr.ndim}-D")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one frame")
    if num_bins is not None and arr.shape[1] != num_bins:
        raise ValueError(f"{name} must have {num_bins} feature bins, got {arr.shape[1]}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_activity(y, num_speakers: int | None = None, name: str = "y") -> np.ndarray:
    """Coerce one recording's reference to a binary T x S matrix."""
    arr = np.asarray(y)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D speaker-activity matrix")
    if num_speakers is not None and arr.shape[1] != num_speakers:
        raise ValueError(
            f"{name} must have {num_speakers} speaker columns, got {arr.shape[1]}"
        )
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return arr.astype(np.int8)


def check_paired_lengths(xs, ys, x_name: str = "X", y_name: str = "y"):
    if len(xs) != len(ys):
        raise ValueError(
            f"{x_name} and {y_name} must have the same number of recordings"
        )
    for i, (x, y) in enumerate(zip(xs, ys)):
        if x.shape[0] != y.shape[0]:
            raise ValueError(
                f"recording {i}: {x_name} has {x.shape[0]} frames but "
                f"{y_name} has {y.shape[0]}"
            )
