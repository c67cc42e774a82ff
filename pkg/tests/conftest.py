import sys
from pathlib import Path

import numpy as np
import pytest
import torch

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if PROJECT_ROOT not in map(Path, sys.path):
    sys.path.insert(0, str(PROJECT_ROOT))

from nuigo.loss_suite import IdentityExtractor
from nuigo.shared.schemas import ModelConfig
from nuigo.shared.settings import CONFIG_KEYS, RUNTIME_KEYS
from nuigo.shared.utils_images import save_image


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for key in list(CONFIG_KEYS) + sorted(RUNTIME_KEYS):
        monkeypatch.delenv(key, raising=False)
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return ModelConfig(stages=3, channels=8, inner_channels=4)


@pytest.fixture
def identity_extractor():
    return IdentityExtractor()


def fundus_like(size: int, rng: np.random.Generator) -> np.ndarray:
    """Bright disc on a dark background, with mild texture."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    radius = np.hypot(yy - 0.5, xx - 0.5)
    base = np.clip(1.1 - 1.6 * radius, 0.05, 1.0)
    color = np.stack([base * 0.9, base * 0.55, base * 0.3], axis=-1)
    return np.clip(color + rng.uniform(-0.03, 0.03, color.shape), 0.0, 1.0)


@pytest.fixture
def make_clean_dir(tmp_path, rng):
    def factory(count: int = 3, size: int = 32, name: str = "clean") -> Path:
        directory = tmp_path / name
        for index in range(count):
            save_image(directory / f"img{index}.png", fundus_like(size, rng))
        return directory

    return factory


@pytest.fixture
def clean_dir(make_clean_dir):
    """Three 32×32 fundus-like PNGs."""
    return make_clean_dir()
