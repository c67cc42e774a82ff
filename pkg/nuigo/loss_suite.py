"""Multi-stage training objective: perceptual terms on every stage, L1 on the last.

All reductions are sums over the batch and every element, so the default
L1 weight of 100 keeps its meaning; gradient magnitudes therefore grow with
image size and batch size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
from torchvision.models import vgg19

from nuigo.shared.errors import ExtractorUnavailableError, InputValidationError
from nuigo.shared.schemas import LossWeights


logger = logging.getLogger(__name__)

DEFAULT_LAYER = "relu5_4"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
VGG19_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]
WEIGHTS_HELP = (
    "Download torchvision's ImageNet VGG-19 weights (vgg19-dcbb9e9d.pth, "
    "https://download.pytorch.org/models/vgg19-dcbb9e9d.pth) and pass the file with "
    "--extractor-weights or set NUIGO_EXTRACTOR_WEIGHTS."
)


def vgg19_layer_names() -> List[str]:
    """Names for each entry of torchvision's vgg19().features (conv1_1, relu1_1, ...)."""
    names: List[str] = []
    block, index = 1, 1
    for item in VGG19_LAYOUT:
        if item == "M":
            names.append(f"pool{block}")
            block, index = block + 1, 1
        else:
            names.extend([f"conv{block}_{index}", f"relu{block}_{index}"])
            index += 1
    return names


def _read_state_dict(path: Path) -> Dict[str, torch.Tensor]:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ExtractorUnavailableError(f"Could not read extractor weights '{path}': {exc}. {WEIGHTS_HELP}") from exc
    if isinstance(state, dict) and "state_dict" in state and isinstance(state["state_dict"], dict):
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise ExtractorUnavailableError(f"'{path}' does not contain a state dict. {WEIGHTS_HELP}")
    return state


class PerceptualExtractor(nn.Module):
    """Frozen VGG-19 feature map at one named layer."""

    def __init__(self, weights_path: str | Path, layer: str = DEFAULT_LAYER):
        super().__init__()
        names = vgg19_layer_names()
        if layer not in names:
            raise InputValidationError(f"Unknown VGG-19 layer '{layer}'; expected one of {', '.join(names)}.")
        path = Path(weights_path).expanduser()
        if not path.is_file():
            raise ExtractorUnavailableError(f"Extractor weights '{path}' not found. {WEIGHTS_HELP}")
        cut = names.index(layer) + 1
        features = vgg19(weights=None).features[:cut]
        state = _read_state_dict(path)

        wanted = {}
        for key, reference in features.state_dict().items():
            source_key = f"features.{key}"
            if source_key not in state:
                raise ExtractorUnavailableError(f"'{path}' lacks layer weights '{source_key}'. {WEIGHTS_HELP}")
            if tuple(state[source_key].shape) != tuple(reference.shape):
                raise ExtractorUnavailableError(
                    f"'{source_key}' in '{path}' has shape {tuple(state[source_key].shape)}, "
                    f"expected {tuple(reference.shape)}."
                )
            wanted[key] = state[source_key]
        features.load_state_dict(wanted)
        features.requires_grad_(False)
        self.features = features.eval()
        self.layer = layer
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        logger.info("Loaded VGG-19 extractor at %s from %s.", layer, path)

    def train(self, mode: bool = True) -> "PerceptualExtractor":
        # Stays in eval mode regardless of the surrounding module.
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features((x - self.mean) / self.std)


class IdentityExtractor(nn.Module):
    """Features are the pixels themselves; for unit tests only."""

    layer = "identity"

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


def load_extractor(weights_path: Optional[str | Path], layer: str = DEFAULT_LAYER) -> PerceptualExtractor:
    if not weights_path:
        raise ExtractorUnavailableError(f"No perceptual extractor weights configured. {WEIGHTS_HELP}")
    return PerceptualExtractor(weights_path, layer)


def _check_same_shape(pred: torch.Tensor, ref: torch.Tensor) -> None:
    if pred.shape != ref.shape:
        raise InputValidationError(f"prediction {tuple(pred.shape)} and reference {tuple(ref.shape)} differ in shape.")


def perceptual_loss(pred: torch.Tensor, ref: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    _check_same_shape(pred, ref)
    with torch.no_grad():
        ref_features = extractor(ref)
    return (extractor(pred) - ref_features).abs().sum()


def l1_loss(pred: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    _check_same_shape(pred, ref)
    return (pred - ref).abs().sum()


@dataclass
class LossReport:
    perceptual: List[torch.Tensor]
    l1: torch.Tensor
    weighted_l1: torch.Tensor
    total: torch.Tensor

    def values(self) -> Dict[str, float]:
        row = {"loss_total": float(self.total.detach())}
        for index, term in enumerate(self.perceptual, start=1):
            row[f"loss_per{index}"] = float(term.detach())
        row["loss_l1"] = float(self.l1.detach())
        return row

    def is_finite(self) -> bool:
        terms = [self.total, self.l1, *self.perceptual]
        return all(bool(torch.isfinite(term).all()) for term in terms)


def total_loss(
    outputs: Sequence[torch.Tensor],
    ref: torch.Tensor,
    extractor: nn.Module,
    weights: Optional[LossWeights] = None,
) -> LossReport:
    """Sum of per-stage perceptual losses plus lambda times the final-stage L1."""
    if not outputs:
        raise InputValidationError("total_loss needs at least one stage output.")
    weights = weights or LossWeights()
    for out in outputs:
        _check_same_shape(out, ref)
    with torch.no_grad():
        ref_features = extractor(ref)
    perceptual = [(extractor(out) - ref_features).abs().sum() for out in outputs]
    l1 = l1_loss(outputs[-1], ref)
    weighted_l1 = weights.lambda_l1 * l1
    total = sum(perceptual[1:], perceptual[0]) + weighted_l1
    return LossReport(perceptual=perceptual, l1=l1, weighted_l1=weighted_l1, total=total)
