"""Input checks shared by the estimator, metrics and CLI."""

from __future__ import annotations

import numpy as np


def check_power_of_two(n: int, name: str = "size", minimum: int = 8) -> int:
    n = int(n)
    if n < minimum or n & (n - 1):
        raise ValueError(f"{name} must be a power of two >= {minimum}, got {n}")
    return n


def check_telescope(telescope) -> tuple[int, int]:
    if isinstance(telescope, str):
        parts = telescope.lower().split("x")
        if len(parts) != 2:
            raise ValueError(f"telescope must look like Z1xZ2, got {telescope!r}")
        telescope = parts
    if isinstance(telescope, (int, np.integer)):
        telescope = (telescope, telescope)
    z1, z2 = (int(t) for t in telescope)
    if z1 < 1 or z2 < 1:
        raise ValueError(f"telescope factors must be >= 1, got {(z1, z2)}")
    return z1, z2


def check_images(
    X,
    channels: int | None = None,
    size: int | None = None,
    value_range: tuple[float, float] | None = (-1.0, 1.0),
    dtype=np.float32,
    min_samples: int = 1,
) -> np.ndarray:
    """Validate an (N, C, H, W) image batch and return it as a float array."""
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ValueError(f"expected images of shape (N, C, H, W), got {arr.shape}")
    if arr.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} image(s), got {arr.shape[0]}")
    if arr.dtype.kind not in "fiu":
        raise TypeError(f"images must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(dtype, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or infinity")
    if channels is not None and arr.shape[1] != channels:
        raise ValueError(f"expected {channels} channel(s), got {arr.shape[1]}")
    if size is not None and arr.shape[2:] != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {arr.shape[2]}x{arr.shape[3]}")
    if value_range is not None:
        lo, hi = value_range
        if arr.min() < lo - 1e-6 or arr.max() > hi + 1e-6:
            raise ValueError(f"pixel values must lie in [{lo}, {hi}]; got [{arr.min():.4g}, {arr.max():.4g}]")
    return arr
