"""Training loop for NuI-Go on synthesized (degraded, clean) pairs.

Adam at a fixed learning rate, batches of 8, Gaussian weight init, the
multi-stage loss from `loss_suite`. Shuffling depends only on (seed, epoch),
so a run resumed from step k replays the same batches an uninterrupted run
would have seen after step k.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from nuigo.loss_suite import total_loss
from nuigo.nedrb_network import NuIGo, load_model, save_model, tensor_to_image
from nuigo.quality_metrics import psnr
from nuigo.shared.errors import InputValidationError, NonFiniteError
from nuigo.shared.schemas import LossWeights, ModelConfig, SampleManifest, TrainConfig, utc_now_iso
from nuigo.shared.utils_files import atomic_write_text
from nuigo.shared.utils_images import load_image, resize_image
from nuigo.shared.utils_seeds import epoch_rng, resolve_device, seed_everything


logger = logging.getLogger(__name__)

LOG_NAME = "train_log.csv"
META_NAME = "train_meta.json"
CHECKPOINT_DIR = "checkpoints"
FINAL_CHECKPOINT = "final.pt"
BEST_CHECKPOINT = "best.pt"


def init_params(
    model_cfg: Optional[ModelConfig] = None,
    train_cfg: Optional[TrainConfig] = None,
    generator: Optional[torch.Generator] = None,
) -> NuIGo:
    """Fresh model with N(0, init_std) kernels, zero biases and a zeroed W_z."""
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    if generator is None:
        generator = torch.Generator().manual_seed(train_cfg.seed)
    model = NuIGo(model_cfg)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                noise = torch.randn(module.weight.shape, generator=generator, dtype=module.weight.dtype)
                module.weight.copy_(noise * train_cfg.init_std)
                if module.bias is not None:
                    module.bias.zero_()
        for block in model.blocks:
            block.non_local_unit.w_z.weight.zero_()
            block.non_local_unit.w_z.bias.zero_()
    return model


def split_dataset(
    manifest: SampleManifest, config: Optional[TrainConfig] = None
) -> Tuple[SampleManifest, SampleManifest]:
    """Seeded train/test split grouped by clean image."""
    config = config or TrainConfig()
    if not manifest.entries:
        raise InputValidationError("Cannot split an empty manifest.")
    clean_ids = sorted(manifest.clean_ids())
    if len(clean_ids) < 2:
        raise InputValidationError(
            f"Need at least 2 distinct clean images to split, got {len(clean_ids)}."
        )
    order = np.random.default_rng(config.seed).permutation(len(clean_ids))
    n_test = min(max(int(round(len(clean_ids) * config.test_fraction)), 1), len(clean_ids) - 1)
    test_ids = {clean_ids[i] for i in order[:n_test]}

    train_entries = [entry for entry in manifest.entries if entry.clean_id not in test_ids]
    test_entries = [entry for entry in manifest.entries if entry.clean_id in test_ids]
    return (
        SampleManifest(entries=train_entries, root=manifest.root),
        SampleManifest(entries=test_entries, root=manifest.root),
    )


class PairDataset(Dataset):
    """(degraded, clean, index) tensors, resized to `image_size` when needed."""

    def __init__(self, manifest: SampleManifest, image_size: int):
        if manifest.root is None:
            raise InputValidationError("Manifest has no root directory; load it with read_manifest.")
        self.root = Path(manifest.root)
        self.entries = list(manifest.entries)
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.entries)

    def _load(self, relative: str) -> torch.Tensor:
        path = self.root / relative
        try:
            img = load_image(path)
        except OSError as exc:
            raise InputValidationError(f"Could not read training image '{path}': {exc}") from exc
        img = resize_image(img, self.image_size)
        return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor, int]:
        entry = self.entries[index]
        return self._load(entry.degraded_id), self._load(entry.clean_id), index


def epoch_batches(size: int, batch_size: int, seed: int, epoch: int) -> List[List[int]]:
    order = epoch_rng(seed, epoch).permutation(size)
    return [order[i : i + batch_size].tolist() for i in range(0, size, batch_size)]


class TrainLog:
    """Append-only CSV of per-step losses."""

    def __init__(self, path: str | Path, stages: int):
        self.path = Path(path)
        self.columns = (
            ["step", "loss_total"]
            + [f"loss_per{index}" for index in range(1, stages + 1)]
            + ["loss_l1", "seconds"]
        )
        self.rows: List[Dict[str, float]] = []

    @classmethod
    def start(cls, path: str | Path, stages: int, resume_step: Optional[int] = None) -> "TrainLog":
        """New log; on resume keeps the rows up to `resume_step` and drops the rest."""
        log = cls(path, stages)
        if resume_step is not None and log.path.is_file():
            log.rows = [row for row in read_train_log(log.path) if row["step"] <= resume_step]
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(log.columns)
        for row in log.rows:
            writer.writerow(log._format(row))
        atomic_write_text(log.path, buffer.getvalue())
        return log

    def _format(self, row: Dict[str, float]) -> List[str]:
        return [
            str(int(row[column])) if column == "step" else repr(float(row[column]))
            for column in self.columns
        ]

    @property
    def last_step(self) -> int:
        return int(self.rows[-1]["step"]) if self.rows else 0

    def append(self, row: Dict[str, float]) -> None:
        if int(row["step"]) <= self.last_step:
            raise InputValidationError(f"Log step {row['step']} does not follow step {self.last_step}.")
        if not all(math.isfinite(float(row[column])) for column in self.columns):
            raise NonFiniteError(f"Non-finite value in log row for step {row['step']}.", step=int(row["step"]))
        with self.path.open("a", encoding="utf-8", newline="") as handle:
            csv.writer(handle, lineterminator="\n").writerow(self._format(row))
        self.rows.append(dict(row))


def read_train_log(path: str | Path) -> List[Dict[str, float]]:
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        return [
            {key: int(value) if key == "step" else float(value) for key, value in row.items()}
            for row in csv.DictReader(handle)
        ]


def _to_device(batch: Tuple[torch.Tensor, ...], device: torch.device) -> Tuple[torch.Tensor, torch.Tensor]:
    degraded, clean = batch[0], batch[1]
    return degraded.to(device, non_blocking=True), clean.to(device, non_blocking=True)


def validate(model: NuIGo, dataset: PairDataset, device: torch.device, batch_size: int = 8) -> float:
    """Mean final-stage PSNR over `dataset`, outputs clamped to [0, 1]."""
    if len(dataset) == 0:
        raise InputValidationError("Validation set is empty.")
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    scores: List[float] = []
    model.eval()
    with torch.inference_mode():
        for batch in loader:
            degraded, clean = _to_device(batch, device)
            final = model(degraded)[-1].clamp(0.0, 1.0)
            for pred, ref in zip(final, clean):
                scores.append(psnr(tensor_to_image(pred[None]), tensor_to_image(ref[None])))
    model.train()
    return float(np.mean(scores))


@dataclass
class TrainResult:
    model: NuIGo
    log: TrainLog
    step: int
    checkpoint: Path
    best_psnr: Optional[float] = None
    stopped_early: bool = False


def _write_meta(
    out_dir: Path,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    weights: LossWeights,
    extractor: nn.Module,
    resumed_from: Optional[str],
) -> None:
    meta = {
        "schema_version": "train_meta_v1",
        "started_at": utc_now_iso(),
        "optimizer": {
            "name": "adam",
            "learning_rate": train_cfg.learning_rate,
            "betas": [train_cfg.beta1, train_cfg.beta2],
            "eps": train_cfg.adam_eps,
        },
        "train_config": train_cfg.dict(),
        "model_config": model_cfg.dict(),
        "loss_weights": weights.dict(),
        "extractor_layer": getattr(extractor, "layer", type(extractor).__name__),
        "resumed_from": resumed_from,
    }
    atomic_write_text(out_dir / META_NAME, json.dumps(meta, indent=2, sort_keys=True) + "\n")


def train(
    manifest: SampleManifest,
    model_cfg: Optional[ModelConfig],
    train_cfg: Optional[TrainConfig],
    extractor: nn.Module,
    out_dir: str | Path,
    *,
    loss_weights: Optional[LossWeights] = None,
    resume: Optional[str | Path] = None,
    progress: bool = False,
) -> TrainResult:
    """Optimize a model on `manifest`; writes checkpoints, the loss log and a meta file under `out_dir`."""
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    weights = loss_weights or LossWeights()
    out_root = Path(out_dir)
    checkpoints = out_root / CHECKPOINT_DIR
    checkpoints.mkdir(parents=True, exist_ok=True)

    seed_everything(train_cfg.seed)
    device = resolve_device(train_cfg.device)
    train_set, test_set = split_dataset(manifest, train_cfg)
    train_data = PairDataset(train_set, train_cfg.image_size)
    test_data = PairDataset(test_set, train_cfg.image_size)
    logger.info(
        "Training on %d pairs, validating on %d pairs (device %s).",
        len(train_data),
        len(test_data),
        device,
    )

    step = 0
    extra: Dict[str, object] = {}
    if resume is not None:
        model, payload = load_model(resume, expected=model_cfg)
        step = int(payload["step"])
        extra = dict(payload.get("extra") or {})
        if extra.get("seed") not in (None, train_cfg.seed):
            logger.warning("Resuming a run seeded with %s using seed %s.", extra.get("seed"), train_cfg.seed)
        logger.info("Resuming from %s at step %d.", resume, step)
    else:
        model = init_params(model_cfg, train_cfg)
    model.to(device).train()
    extractor = extractor.to(device)

    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_cfg.learning_rate,
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.adam_eps,
    )
    if resume is not None and payload.get("optimizer"):
        optimizer.load_state_dict(payload["optimizer"])

    log = TrainLog.start(out_root / LOG_NAME, model_cfg.stages, resume_step=step if resume else None)
    _write_meta(out_root, model_cfg, train_cfg, weights, extractor, str(resume) if resume else None)

    best_psnr: Optional[float] = extra.get("best_psnr")  # type: ignore[assignment]
    stale_epochs = int(extra.get("stale_epochs", 0))  # type: ignore[arg-type]
    steps_per_epoch = math.ceil(len(train_data) / train_cfg.batch_size)
    total_steps = train_cfg.max_steps or train_cfg.epochs * steps_per_epoch
    epoch, offset = divmod(step, steps_per_epoch)
    stopped_early = False
    started = time.monotonic()

    def state() -> Dict[str, object]:
        return {"seed": train_cfg.seed, "best_psnr": best_psnr, "stale_epochs": stale_epochs}

    bar = tqdm(total=total_steps, initial=min(step, total_steps), desc="train", disable=not progress)
    while step < total_steps and not stopped_early:
        batches = epoch_batches(len(train_data), train_cfg.batch_size, train_cfg.seed, epoch)
        loader = DataLoader(
            train_data,
            batch_sampler=batches[offset:],
            num_workers=train_cfg.num_workers,
            pin_memory=device.type == "cuda",
        )
        for position, batch in enumerate(loader, start=offset):
            step += 1
            batch_ids = [train_data.entries[int(i)].degraded_id for i in batch[2]]
            degraded, clean = _to_device(batch, device)
            try:
                outputs = model(degraded)
            except NonFiniteError as exc:
                exc.step, exc.batch_ids = step, batch_ids
                raise
            report = total_loss(outputs, clean, extractor, weights)
            if not report.is_finite():
                raise NonFiniteError(
                    f"Non-finite loss at step {step} (batch: {', '.join(batch_ids)}).",
                    step=step,
                    batch_ids=batch_ids,
                )
            optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            optimizer.step()
            log.append({"step": step, **report.values(), "seconds": time.monotonic() - started})
            bar.update(1)

            if position == len(batches) - 1:
                score = validate(model, test_data, device, train_cfg.batch_size)
                if best_psnr is None or score > best_psnr:
                    best_psnr, stale_epochs = score, 0
                    save_model(checkpoints / BEST_CHECKPOINT, model, step=step, extra=state())
                else:
                    stale_epochs += 1
                logger.info("Epoch %d: validation PSNR %.4f dB (best %.4f).", epoch + 1, score, best_psnr)
                if stale_epochs >= train_cfg.patience:
                    logger.warning(
                        "Stopping early at step %d: no validation gain for %d epochs.", step, stale_epochs
                    )
                    stopped_early = True
            if step % train_cfg.checkpoint_every == 0:
                save_model(checkpoints / f"step_{step:07d}.pt", model, step=step, optimizer=optimizer, extra=state())
            if step >= total_steps or stopped_early:
                break
        epoch, offset = epoch + 1, 0
    bar.close()

    final = save_model(checkpoints / FINAL_CHECKPOINT, model, step=step, optimizer=optimizer, extra=state())
    logger.info("Training finished at step %d; final checkpoint %s.", step, final)
    return TrainResult(
        model=model,
        log=log,
        step=step,
        checkpoint=final,
        best_psnr=best_psnr,
        stopped_early=stopped_early,
    )

