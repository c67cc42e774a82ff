"""Recursive non-local encoder-decoder residual network (NuI-Go).

Each stage (NEDRB) encodes the image with three conv+ReLU layers and 2× max
pooling, mixes global context with an embedded-Gaussian non-local unit, and
decodes with transposed-convolution upsampling and symmetric skip
concatenations into a 3-channel residual added back to the stage input.
Stages are chained: stage t refines the output of stage t-1.

Tensors are N×C×H×W float tensors; images carry values in [0, 1].
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from nuigo.shared.checkpoint import check_parameters, read_checkpoint, write_checkpoint
from nuigo.shared.errors import CheckpointError, InputValidationError, NonFiniteError
from nuigo.shared.schemas import ModelConfig


logger = logging.getLogger(__name__)

DOWNSAMPLE_FACTOR = 8
PARAMS_VERSION = 1

StageOutputs = List[torch.Tensor]
Skips = Tuple[torch.Tensor, torch.Tensor, torch.Tensor]


class NonLocalUnit(nn.Module):
    """Embedded-Gaussian non-local unit with an internal residual connection."""

    def __init__(self, channels: int = 64, inner_channels: int = 32, subsample: bool = False):
        super().__init__()
        self.inner_channels = inner_channels
        self.subsample = subsample
        self.theta = nn.Conv2d(channels, inner_channels, kernel_size=1)
        self.phi = nn.Conv2d(channels, inner_channels, kernel_size=1)
        self.g = nn.Conv2d(channels, inner_channels, kernel_size=1)
        self.w_z = nn.Conv2d(inner_channels, channels, kernel_size=1)
        # The unit starts as the identity map.
        nn.init.zeros_(self.w_z.weight)
        nn.init.zeros_(self.w_z.bias)

    def _keys_values(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        key, value = self.phi(x), self.g(x)
        if self.subsample:
            key, value = F.max_pool2d(key, 2), F.max_pool2d(value, 2)
        # N×Ci×Nk and N×Nk×Ci
        return key.flatten(2), value.flatten(2).transpose(1, 2)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic N×Np×Nk attention matrix."""
        query = self.theta(x).flatten(2).transpose(1, 2)
        key, _ = self._keys_values(x)
        return torch.softmax(torch.bmm(query, key), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, _, h, w = x.shape
        query = self.theta(x).flatten(2).transpose(1, 2)
        key, value = self._keys_values(x)
        weights = torch.softmax(torch.bmm(query, key), dim=-1)
        y = torch.bmm(weights, value).transpose(1, 2).reshape(n, self.inner_channels, h, w)
        return self.w_z(y) + x


def _conv(in_channels: int, out_channels: int, kernel_size: int = 3) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)


def _upsample(channels: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(channels, channels, 3, stride=2, padding=1, output_padding=1)


class NEDRB(nn.Module):
    """One non-local encoder-decoder residual block."""

    def __init__(self, channels: int = 64, inner_channels: int = 32, nonlocal_subsample: bool = False):
        super().__init__()
        self.conv1 = _conv(3, channels)
        self.conv2 = _conv(channels, channels)
        self.conv3 = _conv(channels, channels)
        self.non_local_unit = NonLocalUnit(channels, inner_channels, nonlocal_subsample)
        self.conv4 = _conv(channels, channels)
        self.up1 = _upsample(channels)
        self.conv5 = _conv(2 * channels, channels)
        self.up2 = _upsample(channels)
        self.conv6 = _conv(2 * channels, channels)
        self.up3 = _upsample(channels)
        self.conv7 = _conv(2 * channels, 3, kernel_size=1)

    def encode(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (a1, a2, a3, F_enc); a_k are the pre-pool activations."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise InputValidationError(f"encode expects an N×3×H×W tensor, got {tuple(x.shape)}.")
        h, w = x.shape[-2:]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise InputValidationError(
                f"input is {h}×{w}; height and width must be divisible by {DOWNSAMPLE_FACTOR}."
            )
        a1 = F.relu(self.conv1(x))
        a2 = F.relu(self.conv2(F.max_pool2d(a1, 2)))
        a3 = F.relu(self.conv3(F.max_pool2d(a2, 2)))
        return a1, a2, a3, F.max_pool2d(a3, 2)

    def non_local(self, features: torch.Tensor, stage: Optional[int] = None) -> torch.Tensor:
        out = self.non_local_unit(features)
        if not torch.isfinite(out).all():
            label = f"stage {stage}" if stage is not None else "stage"
            raise NonFiniteError(
                f"Non-finite activations in the {label} non-local unit.", stage=stage, unit="non_local"
            )
        return out

    @staticmethod
    def _join(up: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if up.shape[-2:] != skip.shape[-2:] or up.shape[0] != skip.shape[0]:
            raise InputValidationError(
                f"skip tensor {tuple(skip.shape)} does not match upsampled tensor {tuple(up.shape)}."
            )
        return torch.cat([up, skip], dim=1)

    def decode(
        self,
        f_nlu: torch.Tensor,
        a1: torch.Tensor,
        a2: torch.Tensor,
        a3: torch.Tensor,
        stage_input: torch.Tensor,
    ) -> torch.Tensor:
        d = self._join(self.up1(F.relu(self.conv4(f_nlu))), a3)
        d = self._join(self.up2(F.relu(self.conv5(d))), a2)
        d = self._join(self.up3(F.relu(self.conv6(d))), a1)
        residual = self.conv7(d)
        if residual.shape != stage_input.shape:
            raise InputValidationError(
                f"residual {tuple(residual.shape)} does not match stage input {tuple(stage_input.shape)}."
            )
        return stage_input + residual

    def forward(self, img: torch.Tensor, stage: Optional[int] = None) -> torch.Tensor:
        a1, a2, a3, f_enc = self.encode(img)
        return self.decode(self.non_local(f_enc, stage), a1, a2, a3, img)


class NuIGo(nn.Module):
    """T chained NEDRB stages; with weight sharing all stages use one block."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.version = PARAMS_VERSION
        block_count = 1 if self.config.weight_sharing else self.config.stages
        self.blocks = nn.ModuleList(
            NEDRB(self.config.channels, self.config.inner_channels, self.config.nonlocal_subsample)
            for _ in range(block_count)
        )

    @property
    def stages(self) -> int:
        return self.config.stages

    def block(self, stage_index: int) -> NEDRB:
        return self.blocks[0] if self.config.weight_sharing else self.blocks[stage_index]

    def forward(self, img: torch.Tensor, stages: Optional[int] = None) -> StageOutputs:
        """All stage outputs, unclamped; `stages` stops early after that many stages."""
        count = self.config.stages if stages is None else stages
        if not 1 <= count <= self.config.stages:
            raise InputValidationError(f"stages must lie in [1, {self.config.stages}], got {count}.")
        outputs: StageOutputs = []
        current = img
        for index in range(count):
            current = self.block(index)(current, stage=index + 1)
            outputs.append(current)
        return outputs

    def architecture(self) -> Dict[str, Any]:
        return {
            "stages": self.config.stages,
            "channels": self.config.channels,
            "inner_channels": self.config.inner_channels,
            "weight_sharing": self.config.weight_sharing,
            "nonlocal_subsample": self.config.nonlocal_subsample,
        }


def pad_to_multiple(x: torch.Tensor, multiple: int = DOWNSAMPLE_FACTOR) -> Tuple[torch.Tensor, int, int]:
    h, w = x.shape[-2:]
    pad_h, pad_w = (-h) % multiple, (-w) % multiple
    if not pad_h and not pad_w:
        return x, h, w
    mode = "reflect" if pad_h < h and pad_w < w else "replicate"
    return F.pad(x, (0, pad_w, 0, pad_h), mode=mode), h, w


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().unsqueeze(0)


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    return x.squeeze(0).detach().cpu().double().numpy().transpose(1, 2, 0)


def enhance(
    model: NuIGo,
    img: np.ndarray,
    stages: Optional[int] = None,
    all_stages: bool = False,
    device: Optional[torch.device] = None,
) -> List[np.ndarray]:
    """Enhance one H×W×3 image of any size; returns clamped stage outputs.

    The image is reflect-padded to a multiple of 8 and cropped back afterwards.
    Only the last stage is returned unless `all_stages` is set.
    """
    device = device or next(model.parameters()).device
    x, h, w = pad_to_multiple(image_to_tensor(img).to(device))
    with torch.inference_mode():
        outputs = model(x, stages=stages)
    selected = outputs if all_stages else outputs[-1:]
    return [np.clip(tensor_to_image(out[..., :h, :w]), 0.0, 1.0) for out in selected]


def save_model(
    path: str | Path,
    model: NuIGo,
    *,
    step: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    return write_checkpoint(
        path,
        architecture=model.architecture(),
        parameters=model.state_dict(),
        step=step,
        optimizer=optimizer.state_dict() if optimizer is not None else None,
        extra={"params_version": model.version, **(extra or {})},
    )


def load_model(
    path: str | Path, expected: Optional[ModelConfig] = None
) -> Tuple[NuIGo, Dict[str, Any]]:
    """Build a model from a checkpoint, validating every tensor shape.

    With `expected`, the model is built from that architecture instead of the
    header, so a mismatch is reported against the first differing tensor.
    """
    payload = read_checkpoint(path)
    config = expected or ModelConfig(**payload["architecture"])
    model = NuIGo(config)
    parameters = payload["parameters"]
    check_parameters(parameters, model.state_dict())
    try:
        model.load_state_dict(parameters)
    except RuntimeError as exc:  # pragma: no cover - shapes were checked above
        raise CheckpointError(str(exc)) from exc
    logger.info("Loaded checkpoint %s (step %s).", path, payload.get("step"))
    return model, payload
