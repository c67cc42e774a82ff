#!/usr/bin/env python3
"""Toy-scale end-to-end check: synthesis, training, enhancement and scoring.

Synthesizes pairs from a folder of well-lit retinal images at 128×128, trains
a tied-weight model with the default recipe, then compares held-out PSNR/SSIM
of the enhanced images against the degraded inputs:

  - enhanced mean PSNR >= degraded mean PSNR + 3 dB, and SSIM gains >= 0.02
  - final-stage mean PSNR >= first-stage mean PSNR
  - re-running synthesis and the first 50 steps reproduces manifest and losses

Needs the VGG-19 weights file. Minutes on a GPU, up to a couple of hours on CPU.

    python dev/acceptance_run.py --clean-dir data/fundus --extractor-weights vgg19-dcbb9e9d.pth
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List

import numpy as np

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from nuigo.degradation_synthesis import MANIFEST_NAME, read_manifest, synthesize_dataset  # noqa: E402
from nuigo.loss_suite import load_extractor  # noqa: E402
from nuigo.nedrb_network import enhance  # noqa: E402
from nuigo.quality_metrics import psnr, ssim  # noqa: E402
from nuigo.shared.schemas import ModelConfig, SynthesisConfig, TrainConfig  # noqa: E402
from nuigo.shared.utils_images import load_image  # noqa: E402
from nuigo.trainer import read_train_log, split_dataset, train  # noqa: E402

IMAGE_SIZE = 128
HELD_OUT = 20
DETERMINISM_STEPS = 50


def held_out_scores(result_model, manifest, train_cfg: TrainConfig) -> Dict[str, List[float]]:
    _, test_set = split_dataset(manifest, train_cfg)
    root = Path(manifest.root)
    scores: Dict[str, List[float]] = {key: [] for key in ("psnr_in", "ssim_in", "psnr_s1", "psnr_out", "ssim_out")}
    for entry in test_set.entries[:HELD_OUT]:
        degraded = load_image(root / entry.degraded_id)
        clean = load_image(root / entry.clean_id)
        stages = enhance(result_model, degraded, all_stages=True)
        scores["psnr_in"].append(psnr(degraded, clean))
        scores["ssim_in"].append(ssim(degraded, clean))
        scores["psnr_s1"].append(psnr(stages[0], clean))
        scores["psnr_out"].append(psnr(stages[-1], clean))
        scores["ssim_out"].append(ssim(stages[-1], clean))
    return scores


def check(label: str, passed: bool, detail: str) -> bool:
    print(f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}")
    return passed


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--clean-dir", required=True, help="Folder of well-lit images (200 recommended).")
    parser.add_argument("--extractor-weights", required=True)
    parser.add_argument("--work-dir", default="acceptance_work")
    parser.add_argument("--max-steps", type=int, default=5000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--device", default="auto")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)

    work = Path(args.work_dir)
    synth_cfg = SynthesisConfig(image_size=IMAGE_SIZE, rng_seed=args.seed)
    train_cfg = TrainConfig(
        image_size=IMAGE_SIZE, seed=args.seed, max_steps=args.max_steps, device=args.device,
        checkpoint_every=max(1, args.max_steps // 5), train_fraction=0.9, test_fraction=0.1,
    )
    model_cfg = ModelConfig(weight_sharing=True)
    extractor = load_extractor(args.extractor_weights)

    manifest = synthesize_dataset(args.clean_dir, work / "data", synth_cfg, progress=True)
    result = train(manifest, model_cfg, train_cfg, extractor, work / "run", progress=True)
    scores = {key: float(np.mean(values)) for key, values in
              held_out_scores(result.model, manifest, train_cfg).items()}

    ok = check(
        "efficacy",
        scores["psnr_out"] >= scores["psnr_in"] + 3.0 and scores["ssim_out"] >= scores["ssim_in"] + 0.02,
        f"PSNR {scores['psnr_in']:.3f} -> {scores['psnr_out']:.3f} dB, "
        f"SSIM {scores['ssim_in']:.4f} -> {scores['ssim_out']:.4f}",
    )
    ok &= check(
        "progressive refinement",
        scores["psnr_out"] >= scores["psnr_s1"],
        f"stage 1 {scores['psnr_s1']:.3f} dB, final {scores['psnr_out']:.3f} dB",
    )

    repeat = synthesize_dataset(args.clean_dir, work / "data_repeat", synth_cfg)
    same_manifest = (work / "data" / MANIFEST_NAME).read_text() == (work / "data_repeat" / MANIFEST_NAME).read_text()
    short_cfg = train_cfg.copy(update={"max_steps": DETERMINISM_STEPS, "checkpoint_every": DETERMINISM_STEPS})
    losses = []
    for name in ("det_a", "det_b"):
        train(read_manifest(work / "data" / MANIFEST_NAME), model_cfg, short_cfg, extractor, work / name)
        losses.append([{k: v for k, v in row.items() if k != "seconds"} for row in read_train_log(work / name / "train_log.csv")])
    ok &= check(
        "determinism",
        same_manifest and len(repeat) == len(manifest) and losses[0] == losses[1],
        f"manifest identical: {same_manifest}, {DETERMINISM_STEPS}-step losses identical: {losses[0] == losses[1]}",
    )
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
