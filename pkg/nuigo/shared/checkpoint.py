"""Versioned checkpoint container: header + named parameter blocks."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import torch

from .errors import CheckpointError
from .utils_files import atomic_path


MAGIC = "NUIGO-CKPT"
FORMAT_VERSION = 1
ARCHITECTURE_KEYS = ("stages", "channels", "inner_channels", "weight_sharing", "nonlocal_subsample")

logger = logging.getLogger(__name__)


def write_checkpoint(
    path: str | Path,
    *,
    architecture: Mapping[str, Any],
    parameters: Mapping[str, torch.Tensor],
    step: int = 0,
    optimizer: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write atomically: the target either keeps its old content or gets the new one."""
    target = Path(path)
    payload = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "architecture": {key: architecture[key] for key in ARCHITECTURE_KEYS},
        "parameters": {name: tensor.detach().cpu().clone() for name, tensor in parameters.items()},
        "shapes": {name: list(tensor.shape) for name, tensor in parameters.items()},
        "step": int(step),
        "optimizer": optimizer,
        "extra": dict(extra or {}),
    }
    try:
        with atomic_path(target) as tmp:
            torch.save(payload, tmp)
    except (OSError, RuntimeError) as exc:
        # torch reports a full disk as RuntimeError from its stream writer.
        raise CheckpointError(f"Could not write checkpoint '{target}': {exc}") from exc
    logger.info("Wrote checkpoint %s (step %d).", target, step)
    return target


def read_checkpoint(path: str | Path) -> Dict[str, Any]:
    source = Path(path)
    if not source.is_file():
        raise CheckpointError(f"Checkpoint '{source}' does not exist.")
    try:
        payload = torch.load(source, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"Checkpoint '{source}' could not be decoded: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise CheckpointError(f"'{source}' is not a nuigo checkpoint (bad magic string).")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint '{source}' has format version {version}; this build reads {FORMAT_VERSION}."
        )
    architecture = payload.get("architecture") or {}
    missing = [key for key in ARCHITECTURE_KEYS if key not in architecture]
    if missing:
        raise CheckpointError(f"Checkpoint '{source}' header lacks {', '.join(missing)}.")
    return payload


def check_parameters(
    parameters: Mapping[str, torch.Tensor], expected: Mapping[str, torch.Tensor]
) -> None:
    """Raise naming the first tensor that is missing, unexpected or mis-shaped."""
    for name, reference in expected.items():
        if name not in parameters:
            raise CheckpointError(f"Checkpoint is missing tensor '{name}'.")
        found = tuple(parameters[name].shape)
        if found != tuple(reference.shape):
            raise CheckpointError(
                f"Tensor '{name}' has shape {found}; the architecture expects {tuple(reference.shape)}."
            )
    for name in parameters:
        if name not in expected:
            raise CheckpointError(f"Checkpoint has unexpected tensor '{name}'.")
