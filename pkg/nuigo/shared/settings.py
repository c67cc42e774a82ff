"""Environment and config-file settings for the nuigo command line."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from .errors import InputValidationError


logger = logging.getLogger(__name__)

TRUE_VALUES = {"1", "true", "yes", "on"}
FALSE_VALUES = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    normalized = text.strip().lower()
    if normalized in TRUE_VALUES:
        return True
    if normalized in FALSE_VALUES:
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _parse_floats(text: str) -> List[float]:
    return [float(part) for part in text.replace(";", ",").split(",") if part.strip()]


def _parse_optional_int(text: str) -> Optional[int]:
    stripped = text.strip()
    if not stripped or stripped.lower() == "none":
        return None
    return int(stripped)


# Config key -> (field name, parser). Field names match the CLI dest names.
CONFIG_KEYS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    "NUIGO_SEED": ("seed", int),
    "NUIGO_THRESHOLDS": ("thresholds", _parse_floats),
    "NUIGO_GAMMA_MIN": ("gamma_min", float),
    "NUIGO_GAMMA_MAX": ("gamma_max", float),
    "NUIGO_GAMMA_CONVENTION": ("gamma_convention", str),
    "NUIGO_LUMINANCE_FLOOR": ("luminance_floor", float),
    "NUIGO_IMAGE_SIZE": ("image_size", int),
    "NUIGO_SAVE_MASKS": ("save_masks", _parse_bool),
    "NUIGO_WORKERS": ("workers", int),
    "NUIGO_BATCH_SIZE": ("batch_size", int),
    "NUIGO_LEARNING_RATE": ("learning_rate", float),
    "NUIGO_INIT_STD": ("init_std", float),
    "NUIGO_EPOCHS": ("epochs", int),
    "NUIGO_MAX_STEPS": ("max_steps", _parse_optional_int),
    "NUIGO_CHECKPOINT_EVERY": ("checkpoint_every", int),
    "NUIGO_PATIENCE": ("patience", int),
    "NUIGO_TRAIN_FRACTION": ("train_fraction", float),
    "NUIGO_LAMBDA_L1": ("lambda_l1", float),
    "NUIGO_STAGES": ("stages", int),
    "NUIGO_CHANNELS": ("channels", int),
    "NUIGO_INNER_CHANNELS": ("inner_channels", int),
    "NUIGO_WEIGHT_SHARING": ("weight_sharing", _parse_bool),
    "NUIGO_NONLOCAL_SUBSAMPLE": ("nonlocal_subsample", _parse_bool),
    "NUIGO_DEVICE": ("device", str),
    "NUIGO_NUM_WORKERS": ("num_workers", int),
    "NUIGO_EXTRACTOR_WEIGHTS": ("extractor_weights", str),
    "NUIGO_EXTRACTOR_LAYER": ("extractor_layer", str),
}

RUNTIME_KEYS = {"NUIGO_LOG_LEVEL", "NUIGO_CONFIG"}


def load_config_file(path: str | Path) -> Dict[str, str]:
    """Read a KEY=VALUE config file; unknown NUIGO_* keys are rejected."""
    candidate = Path(path).expanduser()
    if not candidate.is_file():
        raise InputValidationError(f"Config file '{candidate}' does not exist or is not a file.")
    raw = dotenv_values(candidate)
    values: Dict[str, str] = {}
    for key, value in raw.items():
        if key in RUNTIME_KEYS:
            continue
        if key not in CONFIG_KEYS:
            raise InputValidationError(f"Unknown config key '{key}' in {candidate}.")
        if value is not None:
            values[key] = value
    return values


def layered_values(config_path: Optional[str | Path] = None) -> Dict[str, Any]:
    """Merge config file then environment; returns parsed values keyed by field name."""
    raw: Dict[str, str] = {}
    if config_path:
        raw.update(load_config_file(config_path))
    for key in CONFIG_KEYS:
        env_value = os.getenv(key)
        if env_value is not None and env_value.strip():
            raw[key] = env_value
    parsed: Dict[str, Any] = {}
    for key, text in raw.items():
        field, parser = CONFIG_KEYS[key]
        try:
            parsed[field] = parser(text)
        except ValueError as exc:
            raise InputValidationError(f"Invalid value for {key}: {exc}") from exc
    return parsed


@dataclass
class RuntimeSettings:
    log_level: str
    config_path: Optional[str]


def load_runtime_settings() -> RuntimeSettings:
    """Load `.env` from the working directory and read runtime-only keys."""
    load_dotenv(override=False)
    level = os.getenv("NUIGO_LOG_LEVEL", "INFO").strip().upper() or "INFO"
    if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
        logger.warning("Ignoring unknown NUIGO_LOG_LEVEL=%s.", level)
        level = "INFO"
    config_path = os.getenv("NUIGO_CONFIG", "").strip() or None
    return RuntimeSettings(log_level=level, config_path=config_path)
