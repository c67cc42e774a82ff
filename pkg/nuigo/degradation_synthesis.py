"""Paired non-uniform illumination synthesis from well-lit retinal images.

The degraded image is the pixelwise product of the clean image and a smooth
illumination mask L in (0, 1], shared by the three color channels. The mask is
built on the CIE Lab lightness channel: pixels brighter than a threshold keep
L = 1, darker pixels receive a gamma-mapped value, and the coarse result is
smoothed with an 8× block-mean / bilinear pyramid.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from skimage.color import rgb2lab
from tqdm import tqdm

from nuigo.shared.errors import InputValidationError
from nuigo.shared.schemas import ManifestEntry, SampleManifest, SynthesisConfig
from nuigo.shared.utils_files import atomic_write_text
from nuigo.shared.utils_images import (
    list_images,
    load_image,
    quantize_8bit,
    resize_image,
    save_image,
    save_mask,
    validate_image,
)
from nuigo.shared.utils_seeds import entry_seed


logger = logging.getLogger(__name__)

SMOOTHING_FACTOR = 8
MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ["clean_id", "degraded_id", "threshold", "gamma", "seed"]


def rgb_to_luminance(img: np.ndarray) -> np.ndarray:
    """CIE Lab L* (sRGB, D65) rescaled to [0, 1]."""
    data = validate_image(img)
    lightness = rgb2lab(data, illuminant="D65", observer="2")[..., 0]
    return np.clip(lightness / 100.0, 0.0, 1.0)


def coarse_mask(
    lum: np.ndarray,
    threshold: float,
    gamma: float,
    luminance_floor: float = 1e-3,
    convention: str = "power",
) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise InputValidationError(f"threshold {threshold} must lie in (0, 1).")
    if not 0.0 < gamma <= 1.0:
        raise InputValidationError(f"gamma {gamma} must lie in (0, 1].")
    exponent = gamma if convention == "power" else 1.0 / gamma
    dark = np.power(np.maximum(lum, luminance_floor), exponent)
    return np.where(lum > threshold, 1.0, dark)


def _block_mean(mask: np.ndarray, factor: int) -> np.ndarray:
    height, width = mask.shape
    row_starts = np.arange(0, height, factor)
    col_starts = np.arange(0, width, factor)
    sums = np.add.reduceat(np.add.reduceat(mask, row_starts, axis=0), col_starts, axis=1)
    # Edge blocks are averaged over their actual extent.
    row_counts = np.diff(np.append(row_starts, height))
    col_counts = np.diff(np.append(col_starts, width))
    return sums / np.outer(row_counts, col_counts)


def smooth_mask(mask: np.ndarray, factor: int = SMOOTHING_FACTOR) -> np.ndarray:
    """8× block-mean downsampling followed by bilinear upsampling to the input size."""
    if mask.ndim != 2:
        raise InputValidationError(f"mask must be a 2-D array, got shape {mask.shape}.")
    height, width = mask.shape
    if height < factor or width < factor:
        raise InputValidationError(
            f"mask is {height}×{width}; both sides must be at least {factor} for smoothing."
        )
    small = _block_mean(mask.astype(np.float64), factor)
    upsampled = F.interpolate(
        torch.from_numpy(small)[None, None],
        size=(height, width),
        mode="bilinear",
        align_corners=False,
    )[0, 0].numpy()
    return np.minimum(upsampled, 1.0)


def apply_degradation(clean: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if mask.shape != clean.shape[:2]:
        raise InputValidationError(
            f"mask size {mask.shape} does not match image size {clean.shape[:2]}."
        )
    return clean * mask[:, :, None]


def synthesize_pair(
    clean: np.ndarray,
    threshold: float,
    rng: np.random.Generator,
    config: Optional[SynthesisConfig] = None,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Degrade one clean image; returns (degraded, smoothed mask, gamma)."""
    config = config or SynthesisConfig()
    clean = validate_image(clean, name="clean image")
    gamma = float(rng.uniform(*config.gamma_range))
    lum = rgb_to_luminance(clean)
    coarse = coarse_mask(
        lum,
        threshold,
        gamma,
        luminance_floor=config.luminance_floor,
        convention=config.gamma_convention,
    )
    mask = smooth_mask(coarse)
    return apply_degradation(clean, mask), mask, gamma


def _unique_names(paths: List[Path]) -> List[str]:
    stems = [path.stem for path in paths]
    duplicated = {stem for stem in stems if stems.count(stem) > 1}
    return [
        path.name.replace(".", "_") if path.stem in duplicated else path.stem for path in paths
    ]


def _synthesize_one(
    path: Path, name: str, out_dir: Path, config: SynthesisConfig
) -> List[ManifestEntry]:
    try:
        image = load_image(path)
    except (OSError, ValueError) as exc:
        logger.warning("Skipping unreadable image %s: %s", path, exc)
        return []

    # Degrade the stored 8-bit clean image so the saved pair aligns exactly.
    clean = quantize_8bit(resize_image(image, config.image_size)).astype(np.float64) / 255.0
    clean_id = f"clean/{name}.png"
    save_image(out_dir / clean_id, clean)

    entries: List[ManifestEntry] = []
    for index, threshold in enumerate(config.thresholds):
        seed = entry_seed(config.rng_seed, clean_id, index)
        degraded, mask, gamma = synthesize_pair(
            clean, threshold, np.random.default_rng(seed), config
        )
        degraded_id = f"degraded/{name}_t{index}.png"
        save_image(out_dir / degraded_id, degraded)
        if config.save_masks:
            save_mask(out_dir / f"masks/{name}_t{index}.png", mask)
        entries.append(
            ManifestEntry(
                clean_id=clean_id,
                degraded_id=degraded_id,
                threshold=threshold,
                gamma=gamma,
                seed=seed,
            )
        )
    return entries


def synthesize_dataset(
    clean_dir: str | Path,
    out_dir: str | Path,
    config: Optional[SynthesisConfig] = None,
    progress: bool = False,
) -> SampleManifest:
    """Write one degraded image per (clean image, threshold) plus `manifest.csv`."""
    config = config or SynthesisConfig()
    paths = list_images(clean_dir)
    if not paths:
        raise InputValidationError(f"No images found in '{clean_dir}'.")
    out_root = Path(out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    names = _unique_names(paths)

    def work(item: Tuple[Path, str]) -> List[ManifestEntry]:
        return _synthesize_one(item[0], item[1], out_root, config)

    items = list(zip(paths, names))
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(
            tqdm(pool.map(work, items), total=len(items), desc="synthesize", disable=not progress)
        )

    entries = [entry for group in results for entry in group]
    if not entries:
        raise InputValidationError(f"None of the {len(paths)} files in '{clean_dir}' could be decoded.")
    manifest = SampleManifest(entries=entries, root=str(out_root))
    write_manifest(out_root / MANIFEST_NAME, manifest)
    logger.info(
        "Synthesized %d pairs from %d clean images into %s.",
        len(entries),
        len(entries) // len(config.thresholds),
        out_root,
    )
    return manifest


def write_manifest(path: str | Path, manifest: SampleManifest) -> None:
    """Write the manifest CSV atomically (temp file + rename)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for entry in manifest.entries:
        writer.writerow(
            [entry.clean_id, entry.degraded_id, repr(entry.threshold), repr(entry.gamma), entry.seed]
        )
    atomic_write_text(path, buffer.getvalue())


def read_manifest(path: str | Path) -> SampleManifest:
    source = Path(path)
    if not source.is_file():
        raise InputValidationError(f"Manifest '{source}' does not exist.")
    with source.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != MANIFEST_HEADER:
            raise InputValidationError(
                f"Manifest '{source}' must have header {','.join(MANIFEST_HEADER)}."
            )
        entries = [
            ManifestEntry(
                clean_id=row["clean_id"],
                degraded_id=row["degraded_id"],
                threshold=float(row["threshold"]),
                gamma=float(row["gamma"]),
                seed=int(row["seed"]),
            )
            for row in reader
        ]
    return SampleManifest(entries=entries, root=str(source.parent))
