"""Shared schemas for the nuigo synthesis, training and evaluation pipeline."""

from __future__ import annotations

from collections import Counter
from datetime import datetime
from typing import Dict, List, Optional, Tuple

try:
    from pydantic.v1 import BaseModel, root_validator, validator
except Exception:  # pragma: no cover - fallback for pydantic v1
    from pydantic import BaseModel, root_validator, validator


class Model(BaseModel):
    class Config:
        extra = "allow"
        allow_mutation = True


class ConfigModel(BaseModel):
    """Base for user-facing configuration: unknown keys are rejected."""

    class Config:
        extra = "forbid"
        allow_mutation = True
        validate_assignment = True


def utc_now_iso() -> str:
    return datetime.utcnow().replace(microsecond=0).isoformat() + "Z"


class SynthesisConfig(ConfigModel):
    schema_version: str = "synthesis_v1"
    thresholds: List[float] = [0.1, 0.2, 0.3, 0.4, 0.5]
    gamma_range: Tuple[float, float] = (0.1, 0.5)
    luminance_floor: float = 1e-3
    rng_seed: int = 0
    gamma_convention: str = "power"  # power: v**gamma, inverse: v**(1/gamma)
    image_size: int = 256
    save_masks: bool = False
    workers: int = 1

    @validator("thresholds")
    def _check_thresholds(cls, value):
        if not value:
            raise ValueError("at least one threshold is required")
        for t in value:
            if not 0.0 < t < 1.0:
                raise ValueError(f"threshold {t} must lie in (0, 1)")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("thresholds must be strictly increasing")
        return list(value)

    @validator("gamma_range")
    def _check_gamma_range(cls, value):
        lo, hi = value
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"gamma_range {value} must satisfy 0 < min <= max <= 1")
        return (float(lo), float(hi))

    @validator("luminance_floor")
    def _check_floor(cls, value):
        if not 0.0 < value < 1.0:
            raise ValueError("luminance_floor must lie in (0, 1)")
        return value

    @validator("gamma_convention")
    def _check_convention(cls, value):
        normalized = value.strip().lower()
        if normalized not in {"power", "inverse"}:
            raise ValueError("gamma_convention must be 'power' or 'inverse'")
        return normalized

    @validator("image_size")
    def _check_image_size(cls, value):
        if value < 8:
            raise ValueError("image_size must be at least 8")
        return value

    @validator("workers")
    def _check_workers(cls, value):
        return max(1, int(value))


class ManifestEntry(Model):
    clean_id: str
    degraded_id: str
    threshold: float
    gamma: float
    seed: int


class SampleManifest(Model):
    schema_version: str = "manifest_v1"
    entries: List[ManifestEntry] = []
    root: Optional[str] = None  # directory the ids are relative to

    @validator("entries", pre=True, always=True)
    def _default_entries(cls, value):
        return list(value or [])

    def clean_ids(self) -> List[str]:
        """Distinct clean ids in first-seen order."""
        return list(dict.fromkeys(entry.clean_id for entry in self.entries))

    def threshold_counts(self) -> Dict[float, int]:
        return dict(sorted(Counter(entry.threshold for entry in self.entries).items()))

    def __len__(self) -> int:
        return len(self.entries)


class ModelConfig(ConfigModel):
    schema_version: str = "model_v1"
    stages: int = 3
    channels: int = 64
    inner_channels: int = 32
    weight_sharing: bool = True
    nonlocal_subsample: bool = False

    @validator("stages", "channels", "inner_channels")
    def _positive(cls, value):
        if value < 1:
            raise ValueError("must be a positive integer")
        return value


class TrainConfig(ConfigModel):
    schema_version: str = "train_v1"
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init_std: float = 0.02
    epochs: int = 200
    max_steps: Optional[int] = None
    image_size: int = 256
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    seed: int = 0
    checkpoint_every: int = 1000
    patience: int = 20
    num_workers: int = 0
    device: str = "auto"

    @validator("batch_size", "epochs", "checkpoint_every")
    def _at_least_one(cls, value):
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @validator("learning_rate")
    def _non_negative_lr(cls, value):
        # Zero is allowed and freezes the parameters.
        if value < 0:
            raise ValueError("learning_rate must be >= 0")
        return value

    @validator("init_std", "adam_eps")
    def _strictly_positive(cls, value):
        if value <= 0:
            raise ValueError("must be > 0")
        return value

    @validator("beta1", "beta2")
    def _beta_range(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError("Adam betas must lie in [0, 1)")
        return value

    @validator("image_size")
    def _image_size_multiple_of_eight(cls, value):
        if value < 8 or value % 8:
            raise ValueError("image_size must be a positive multiple of 8")
        return value

    @validator("max_steps")
    def _max_steps(cls, value):
        if value is not None and value < 1:
            raise ValueError("max_steps must be at least 1")
        return value

    @validator("device")
    def _device(cls, value):
        normalized = value.strip().lower()
        if normalized not in {"auto", "cpu", "cuda"} and not normalized.startswith("cuda:"):
            raise ValueError("device must be auto, cpu or cuda[:N]")
        return normalized

    @root_validator(skip_on_failure=True)
    def _fractions_sum_to_one(cls, values):
        train, test = values.get("train_fraction"), values.get("test_fraction")
        if not (0.0 < train < 1.0 and 0.0 < test < 1.0):
            raise ValueError("split fractions must lie in (0, 1)")
        if abs(train + test - 1.0) > 1e-9:
            raise ValueError("train_fraction + test_fraction must equal 1")
        return values


class LossWeights(ConfigModel):
    lambda_l1: float = 100.0

    @validator("lambda_l1")
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError("lambda_l1 must be >= 0")
        return value


class MetricEntry(Model):
    id: str
    psnr_db: float
    ssim: float
    niqe: Optional[float] = None


class MetricReport(Model):
    schema_version: str = "metrics_v1"
    entries: List[MetricEntry] = []
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0
    count: int = 0
    failed: List[str] = []
    generated_at: Optional[str] = None

    @validator("generated_at", pre=True, always=True)
    def _default_generated_at(cls, value):
        return value or utc_now_iso()

    @classmethod
    def from_entries(
        cls, entries: List[MetricEntry], failed: Optional[List[str]] = None
    ) -> "MetricReport":
        count = len(entries)
        if count == 0:
            return cls(entries=[], count=0, failed=list(failed or []))
        return cls(
            entries=list(entries),
            failed=list(failed or []),
            mean_psnr=sum(e.psnr_db for e in entries) / count,
            mean_ssim=sum(e.ssim for e in entries) / count,
            count=count,
        )
