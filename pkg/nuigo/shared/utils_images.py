"""Image decode/encode and validation helpers."""

from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np
from PIL import Image as PILImage
from skimage.transform import resize

from .errors import InputValidationError
from .utils_files import atomic_path


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
MIN_SIDE = 8


def list_images(directory: str | Path) -> List[Path]:
    """Image files directly inside `directory`, sorted by name."""
    root = Path(directory)
    if not root.is_dir():
        raise InputValidationError(f"Input directory '{root}' does not exist or is not a directory.")
    return sorted(
        path
        for path in root.iterdir()
        if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES and not path.name.startswith(".")
    )


def validate_image(img: np.ndarray, name: str = "image", min_side: int = MIN_SIDE) -> np.ndarray:
    """Check an H×W×3 array in [0, 1] and return it as float64."""
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        shape = getattr(img, "shape", None)
        raise InputValidationError(f"{name} must be an H×W×3 array, got shape {shape}.")
    height, width = img.shape[:2]
    if height < min_side or width < min_side:
        raise InputValidationError(
            f"{name} is {height}×{width}; both sides must be at least {min_side} pixels."
        )
    data = img.astype(np.float64, copy=False)
    if not np.all(np.isfinite(data)):
        raise InputValidationError(f"{name} contains non-finite pixel values.")
    if data.min() < 0.0 or data.max() > 1.0:
        raise InputValidationError(f"{name} values must lie in [0, 1].")
    return data


def to_unit_range(raw: np.ndarray) -> np.ndarray:
    """Normalize an integer raster by its dtype maximum; floats pass through."""
    if np.issubdtype(raw.dtype, np.integer):
        return raw.astype(np.float64) / float(np.iinfo(raw.dtype).max)
    return raw.astype(np.float64)


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file into an H×W×3 float64 array in [0, 1]."""
    with PILImage.open(path) as handle:
        handle.load()
        if handle.mode in {"I;16", "I;16B", "I;16L"}:
            raw = np.asarray(handle, dtype=np.uint16)
        elif handle.mode in {"RGB", "L"}:
            raw = np.asarray(handle)
        elif handle.mode == "I":
            raw = np.asarray(handle).astype(np.uint16)
        else:
            raw = np.asarray(handle.convert("RGB"))
    data = to_unit_range(raw)
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    return np.clip(data[:, :, :3], 0.0, 1.0)


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    out = resize(img, (size, size, img.shape[2]), order=1, mode="reflect", anti_aliasing=True)
    return np.clip(out, 0.0, 1.0)


def quantize_8bit(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize_16bit(mask: np.ndarray) -> np.ndarray:
    return np.round(np.clip(mask, 0.0, 1.0) * 65535.0).astype(np.uint16)


def _atomic_save(pil_image: PILImage.Image, path: Path) -> None:
    with atomic_path(path) as tmp:
        pil_image.save(tmp, format="PNG")


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write an 8-bit RGB PNG."""
    _atomic_save(PILImage.fromarray(quantize_8bit(img)), Path(path))


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a single-channel 16-bit PNG."""
    _atomic_save(PILImage.fromarray(quantize_16bit(mask)), Path(path))
