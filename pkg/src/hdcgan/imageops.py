"""Image resizing, colour conversion and file IO for float image arrays.

Arrays are channel-first: ``(C, H, W)`` for one image, ``(N, C, H, W)``
for a batch. Values in files are 8-bit; values in memory are floats in
``[-1, 1]``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm", ".jpg", ".jpeg", ".bmp")

_FILTERS = {"bilinear": Image.Resampling.BILINEAR, "nearest": Image.Resampling.NEAREST}


def resize(images: np.ndarray, size: tuple[int, int], method: str = "bilinear") -> np.ndarray:
    """Resize the last two axes to ``size`` = (height, width).

    Bilinear resampling widens its support when shrinking, so downscales are
    antialiased.
    """
    if method not in _FILTERS:
        raise ValueError(f"unknown interpolation {method!r}; expected one of {sorted(_FILTERS)}")
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise ValueError(f"invalid target size {size}")
    arr = np.asarray(images)
    if arr.shape[-2:] == (h, w):
        return arr.copy()
    lead = arr.shape[:-2]
    flat = arr.reshape(-1, *arr.shape[-2:]).astype(np.float32)
    out = np.empty((flat.shape[0], h, w), dtype=np.float32)
    for i, plane in enumerate(flat):
        img = Image.fromarray(plane, mode="F")
        out[i] = np.asarray(img.resize((w, h), resample=_FILTERS[method]))
    return out.reshape(*lead, h, w).astype(arr.dtype if arr.dtype.kind == "f" else np.float32)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of a (C, H, W) image; single-channel input passes through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[0] == 1:
        return image[0]
    if image.shape[0] == 3:
        return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    raise ValueError(f"expected 1 or 3 channels, got shape {image.shape}")


def hflip(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images)[..., ::-1])


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit values to [-1, 1] via ``2x/255 - 1``."""
    return (2.0 * np.asarray(pixels, dtype=np.float32) / 255.0 - 1.0).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_rgb(path: str | Path) -> np.ndarray:
    """Decode an image file to an (3, H, W) uint8 array."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Decode to (3, H, W) floats in [-1, 1], optionally resized to size x size."""
    img = to_unit_range(load_rgb(path))
    if size is not None:
        img = np.clip(resize(img, (size, size)), -1.0, 1.0)
    return img


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = to_uint8(image)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def tile(images: np.ndarray, columns: int | None = None, pad: int = 2) -> np.ndarray:
    """Arrange (N, C, H, W) images into one (C, H', W') sheet."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    cols = columns or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    sheet = np.full((c, rows * (h + pad) + pad, cols * (w + pad) + pad), -1.0, dtype=np.float32)
    for idx in range(n):
        r, q = divmod(idx, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        sheet[:, y : y + h, x : x + w] = images[idx]
    return sheet


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_folder(directory: str | Path, size: int | None = None) -> np.ndarray:
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no images found in {directory}")
    return np.stack([load_image(p, size) for p in paths])
