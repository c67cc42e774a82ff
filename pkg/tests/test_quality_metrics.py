import csv
import math

import numpy as np
import pytest

from nuigo.degradation_synthesis import rgb_to_luminance
from nuigo.quality_metrics import (
    MEAN_ROW_ID,
    PSNR_CAP_DB,
    evaluate_pairs,
    load_niqe,
    psnr,
    ssim,
    summary_line,
    write_report,
)
from nuigo.shared.errors import InputValidationError
from nuigo.shared.utils_images import load_image, save_image


def psnr_oracle(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    return 10 * math.log10(1.0 / (total / a.size))


def ssim_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window SSIM over positions where the 11×11 window fits."""
    taps = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5**2))
    taps /= taps.sum()
    window = np.outer(taps, taps)
    c1, c2 = 0.01**2, 0.03**2
    values = []
    for i in range(5, a.shape[0] - 5):
        for j in range(5, a.shape[1] - 5):
            pa = a[i - 5 : i + 6, j - 5 : j + 6]
            pb = b[i - 5 : i + 6, j - 5 : j + 6]
            mu_a, mu_b = np.sum(window * pa), np.sum(window * pb)
            var_a = np.sum(window * pa * pa) - mu_a**2
            var_b = np.sum(window * pb * pb) - mu_b**2
            cov = np.sum(window * pa * pb) - mu_a * mu_b
            values.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(values))


def noisy_pair(rng, size=32):
    ref = rng.uniform(0.1, 0.9, size=(size, size, 3))
    pred = np.clip(ref + rng.normal(0, 0.05, size=ref.shape), 0.0, 1.0)
    return pred, ref


def test_psnr_matches_oracle(rng):
    for _ in range(20):
        pred, ref = noisy_pair(rng)
        assert psnr(pred, ref) == pytest.approx(psnr_oracle(pred, ref), abs=1e-4)


def test_psnr_of_identical_images_is_capped(rng):
    img = rng.uniform(size=(16, 16, 3))
    assert psnr(img, img) == PSNR_CAP_DB


def test_psnr_of_known_error():
    ref = np.zeros((8, 8, 3))
    pred = np.full((8, 8, 3), 0.1)
    assert psnr(pred, ref) == pytest.approx(20.0)


def test_ssim_matches_oracle_on_luminance(rng):
    for _ in range(20):
        pred, ref = noisy_pair(rng)
        expected = ssim_oracle(rgb_to_luminance(pred), rgb_to_luminance(ref))
        assert ssim(pred, ref) == pytest.approx(expected, abs=1e-3)


def test_ssim_of_identical_images_is_exactly_one(rng):
    img = rng.uniform(size=(16, 16, 3))
    assert ssim(img, img) == 1.0


def test_metrics_are_symmetric(rng):
    for _ in range(5):
        a, b = noisy_pair(rng)
        assert psnr(a, b) == psnr(b, a)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_psnr_falls_as_noise_grows(rng):
    ref = rng.uniform(0.2, 0.8, size=(32, 32, 3))
    noise = rng.uniform(-1.0, 1.0, size=ref.shape)
    scores = [psnr(np.clip(ref + amplitude * noise, 0.0, 1.0), ref) for amplitude in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(later < earlier for earlier, later in zip(scores, scores[1:]))


def test_ssim_of_inverted_image_is_below_self_similarity(rng):
    a = rng.uniform(size=(32, 32, 3))
    inverted = ssim(a, 1.0 - a)
    assert inverted < 1.0
    assert inverted < ssim(a, a)


def test_psnr_is_non_negative_for_unit_range_inputs(rng):
    level = 1.0 / 255.0
    worst = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    one_level = np.full((16, 16, 3), 0.5), np.full((16, 16, 3), 0.5 + level)
    assert psnr(*worst) == pytest.approx(0.0, abs=1e-12)
    assert psnr(*worst) >= 0.0
    assert psnr(*one_level) > 0.0
    for _ in range(10):
        a = np.round(rng.uniform(size=(16, 16, 3)) * 255) / 255
        b = np.round(rng.uniform(size=(16, 16, 3)) * 255) / 255
        assert psnr(a, b) >= 0.0


def test_metrics_reject_mismatched_or_tiny_images():
    with pytest.raises(InputValidationError):
        psnr(np.zeros((8, 8, 3)), np.zeros((8, 16, 3)))
    with pytest.raises(InputValidationError):
        ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


@pytest.fixture
def folders(tmp_path, rng):
    pred, ref = tmp_path / "pred", tmp_path / "ref"
    for index in range(3):
        p, r = noisy_pair(rng)
        save_image(pred / f"img{index}.png", p)
        save_image(ref / f"img{index}.png", r)
    return pred, ref


def test_identical_folders_have_unit_ssim(folders):
    _, ref = folders
    report = evaluate_pairs(ref, ref)
    assert report.count == 3
    assert report.mean_ssim == 1.0
    assert report.mean_psnr == PSNR_CAP_DB
    assert "mean SSIM 1.0000" in summary_line(report)


def test_evaluate_scores_each_pair(folders):
    pred, ref = folders
    report = evaluate_pairs(pred, ref, workers=2)
    assert [e.id for e in report.entries] == ["img0", "img1", "img2"]
    expected = psnr(load_image(pred / "img1.png"), load_image(ref / "img1.png"))
    assert report.entries[1].psnr_db == pytest.approx(expected)
    assert report.mean_psnr == pytest.approx(np.mean([e.psnr_db for e in report.entries]))


def test_unmatched_ids_are_excluded_with_a_warning(folders, rng, caplog):
    pred, ref = folders
    save_image(pred / "extra.png", rng.uniform(size=(32, 32, 3)))
    report = evaluate_pairs(pred, ref)
    assert report.count == 3
    assert "extra" in caplog.text


def test_empty_intersection_is_an_error(tmp_path, rng):
    save_image(tmp_path / "a" / "x.png", rng.uniform(size=(16, 16, 3)))
    save_image(tmp_path / "b" / "y.png", rng.uniform(size=(16, 16, 3)))
    with pytest.raises(InputValidationError):
        evaluate_pairs(tmp_path / "a", tmp_path / "b")


def test_unreadable_pairs_are_reported_as_failed(folders):
    pred, ref = folders
    (pred / "img2.png").write_bytes(b"corrupt")
    report = evaluate_pairs(pred, ref)
    assert report.count == 2
    assert report.failed == ["img2"]


def test_report_has_mean_row_and_optional_niqe(folders, tmp_path):
    pred, ref = folders
    niqe_path = tmp_path / "niqe.csv"
    niqe_path.write_text("id,niqe\nimg0.png,4.5\nimg1,5.5\nimg2,6.5\n", encoding="utf-8")
    report = evaluate_pairs(pred, ref, niqe=load_niqe(niqe_path))
    out = tmp_path / "reports" / "metrics.csv"
    write_report(out, report)
    with out.open(newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert list(rows[0]) == ["id", "psnr_db", "ssim", "niqe"]
    assert [row["id"] for row in rows] == ["img0", "img1", "img2", MEAN_ROW_ID]
    assert float(rows[-1]["niqe"]) == pytest.approx(5.5)
    assert float(rows[-1]["psnr_db"]) == pytest.approx(report.mean_psnr, abs=1e-6)


def test_report_without_niqe_has_three_columns(folders, tmp_path):
    pred, ref = folders
    out = tmp_path / "metrics.csv"
    write_report(out, evaluate_pairs(pred, ref))
    assert out.read_text(encoding="utf-8").splitlines()[0] == "id,psnr_db,ssim"


def test_niqe_file_needs_expected_columns(tmp_path):
    path = tmp_path / "niqe.csv"
    path.write_text("name,score\na,1\n", encoding="utf-8")
    with pytest.raises(InputValidationError):
        load_niqe(path)
