"""Full-reference image quality: PSNR and SSIM over paired image folders."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from nuigo.degradation_synthesis import rgb_to_luminance
from nuigo.shared.errors import InputValidationError
from nuigo.shared.schemas import MetricEntry, MetricReport
from nuigo.shared.utils_files import atomic_write_text
from nuigo.shared.utils_images import list_images, load_image


logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MEAN_ROW_ID = "__mean__"


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape:
        raise InputValidationError(f"images differ in shape: {a.shape} vs {b.shape}.")
    return np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    """PSNR in dB with peak 1.0; identical inputs report `cap`."""
    a, b = _check_pair(a, b)
    if np.array_equal(a, b):
        return cap
    return min(float(peak_signal_noise_ratio(a, b, data_range=1.0)), cap)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM on luminance (11×11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03)."""
    a, b = _check_pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise InputValidationError(
            f"SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {a.shape[0]}×{a.shape[1]}."
        )
    if a.ndim == 3:
        a, b = rgb_to_luminance(a), rgb_to_luminance(b)
    if np.array_equal(a, b):
        return 1.0
    return float(
        structural_similarity(
            a,
            b,
            data_range=1.0,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
    )


def _index_by_stem(directory: str | Path) -> Dict[str, Path]:
    return {path.stem: path for path in list_images(directory)}


def load_niqe(path: str | Path) -> Dict[str, float]:
    """Externally computed NIQE scores from a CSV with columns id,niqe."""
    source = Path(path)
    if not source.is_file():
        raise InputValidationError(f"NIQE file '{source}' does not exist.")
    with source.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if not reader.fieldnames or not {"id", "niqe"} <= set(reader.fieldnames):
            raise InputValidationError(f"NIQE file '{source}' must have columns id,niqe.")
        return {Path(row["id"]).stem: float(row["niqe"]) for row in reader}


def evaluate_pairs(
    pred_dir: str | Path,
    ref_dir: str | Path,
    workers: int = 1,
    niqe: Optional[Dict[str, float]] = None,
) -> MetricReport:
    """Score every prediction against the reference with the same file stem."""
    predictions = _index_by_stem(pred_dir)
    references = _index_by_stem(ref_dir)
    shared = sorted(set(predictions) & set(references))
    unmatched = sorted(set(predictions) ^ set(references))
    if unmatched:
        logger.warning("Excluding %d unmatched ids: %s", len(unmatched), ", ".join(unmatched))
    if not shared:
        raise InputValidationError(f"No matching ids between '{pred_dir}' and '{ref_dir}'.")

    def score(image_id: str) -> Optional[MetricEntry]:
        try:
            pred, ref = load_image(predictions[image_id]), load_image(references[image_id])
            return MetricEntry(
                id=image_id,
                psnr_db=psnr(pred, ref),
                ssim=ssim(pred, ref),
                niqe=(niqe or {}).get(image_id),
            )
        except (OSError, ValueError) as exc:
            logger.error("Could not evaluate %s: %s", image_id, exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(score, shared))

    entries = [entry for entry in results if entry is not None]
    failed = [image_id for image_id, entry in zip(shared, results) if entry is None]
    report = MetricReport.from_entries(entries, failed=failed)
    logger.info(
        "Evaluated %d pairs: mean PSNR %.4f dB, mean SSIM %.4f.",
        report.count,
        report.mean_psnr,
        report.mean_ssim,
    )
    return report


def summary_line(report: MetricReport) -> str:
    return (
        f"{report.count} pairs | mean PSNR {report.mean_psnr:.4f} dB | "
        f"mean SSIM {report.mean_ssim:.4f}"
        + (f" | {len(report.failed)} failed" if report.failed else "")
    )


def write_report(path: str | Path, report: MetricReport) -> None:
    """CSV with one row per pair and a closing `__mean__` row."""
    with_niqe = any(entry.niqe is not None for entry in report.entries)
    header = ["id", "psnr_db", "ssim"] + (["niqe"] if with_niqe else [])
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for entry in report.entries:
        row = [entry.id, f"{entry.psnr_db:.6f}", f"{entry.ssim:.6f}"]
        if with_niqe:
            row.append("" if entry.niqe is None else f"{entry.niqe:.6f}")
        writer.writerow(row)
    mean_row = [MEAN_ROW_ID, f"{report.mean_psnr:.6f}", f"{report.mean_ssim:.6f}"]
    if with_niqe:
        scored = [entry.niqe for entry in report.entries if entry.niqe is not None]
        mean_row.append(f"{sum(scored) / len(scored):.6f}")
    writer.writerow(mean_row)

    atomic_write_text(path, buffer.getvalue())
