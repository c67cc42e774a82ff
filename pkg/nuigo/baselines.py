"""Traditional illumination correction used as comparison baselines."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Dict

import numpy as np
from skimage import exposure
from tqdm import tqdm

from nuigo.shared.errors import InputValidationError
from nuigo.shared.utils_images import list_images, load_image, save_image, validate_image


logger = logging.getLogger(__name__)

METHODS = ("clahe", "he", "gamma")


def clahe(img: np.ndarray, clip_limit: float = 0.01) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization, per channel."""
    data = validate_image(img)
    if not 0.0 < clip_limit <= 1.0:
        raise InputValidationError(f"clip_limit {clip_limit} must lie in (0, 1].")
    return np.clip(exposure.equalize_adapthist(data, clip_limit=clip_limit), 0.0, 1.0)


def histogram_equalization(img: np.ndarray) -> np.ndarray:
    data = validate_image(img)
    channels = [exposure.equalize_hist(data[..., c]) for c in range(3)]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0)


def gamma_correction(img: np.ndarray, gamma: float = 0.5) -> np.ndarray:
    """Global power law v**gamma; gamma < 1 brightens."""
    data = validate_image(img)
    if gamma <= 0:
        raise InputValidationError(f"gamma {gamma} must be > 0.")
    return exposure.adjust_gamma(data, gamma)


def get_method(name: str, gamma: float = 0.5, clip_limit: float = 0.01) -> Callable[[np.ndarray], np.ndarray]:
    methods: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
        "clahe": lambda img: clahe(img, clip_limit),
        "he": histogram_equalization,
        "gamma": lambda img: gamma_correction(img, gamma),
    }
    if name not in methods:
        raise InputValidationError(f"Unknown baseline '{name}'; expected one of {', '.join(METHODS)}.")
    return methods[name]


def run_baseline(
    method: str,
    input_dir: str | Path,
    output_dir: str | Path,
    *,
    gamma: float = 0.5,
    clip_limit: float = 0.01,
    progress: bool = False,
) -> int:
    """Apply `method` to every image in `input_dir`; returns the number written."""
    apply = get_method(method, gamma=gamma, clip_limit=clip_limit)
    paths = list_images(input_dir)
    if not paths:
        raise InputValidationError(f"No images found in '{input_dir}'.")
    out_root = Path(output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    written = 0
    for path in tqdm(paths, desc=method, disable=not progress):
        try:
            img = load_image(path)
        except OSError as exc:
            logger.warning("Skipping unreadable image %s: %s", path, exc)
            continue
        save_image(out_root / f"{path.stem}.png", apply(img))
        written += 1
    logger.info("Baseline %s wrote %d images to %s.", method, written, out_root)
    return written
