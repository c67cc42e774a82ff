"""Seed derivation helpers."""

from __future__ import annotations

import random
import zlib

import numpy as np
import torch


def entry_seed(global_seed: int, clean_id: str, threshold_index: int) -> int:
    """Stable per-sample seed derived from (global seed, clean id, threshold index)."""
    key = zlib.crc32(clean_id.encode("utf-8"))
    sequence = np.random.SeedSequence([int(global_seed) & 0xFFFFFFFF, key, int(threshold_index)])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Shuffling stream for one epoch; depends only on (seed, epoch) so resumes replay it."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(epoch)]))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed & 0xFFFFFFFF)
    torch.manual_seed(seed)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False


def resolve_device(name: str = "auto") -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)
