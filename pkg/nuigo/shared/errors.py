"""Error types raised across the nuigo pipeline."""

from __future__ import annotations

from typing import Optional, Sequence


class NuiGoError(Exception):
    """Base class for every error the pipeline raises on purpose."""


class InputValidationError(NuiGoError, ValueError):
    """Raised when an input violates a documented precondition."""


class NonFiniteError(NuiGoError):
    """Raised when activations or losses stop being finite."""

    def __init__(
        self,
        message: str,
        *,
        stage: Optional[int] = None,
        unit: Optional[str] = None,
        step: Optional[int] = None,
        batch_ids: Optional[Sequence[str]] = None,
    ) -> None:
        super().__init__(message)
        self.stage = stage
        self.unit = unit
        self.step = step
        self.batch_ids = list(batch_ids or [])


class ExtractorUnavailableError(NuiGoError):
    """Raised when the perceptual extractor weights cannot be loaded."""


class CheckpointError(NuiGoError):
    """Raised when a checkpoint cannot be written or does not match the model."""
