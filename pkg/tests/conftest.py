from __future__ import annotations

import numpy as np
import pytest
import torch
from skimage import data

from refcolor.features import ExtractorConfig, Extractors
from refcolor.image_core import resize, to_grayscale

# Colour photographs shipped with scikit-image; no network needed.
COLOR_IMAGES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry", "hubble_deep_field")


def skimage_color(name: str, size: int | None = None) -> np.ndarray:
    img = getattr(data, name)()[..., :3].astype(np.float32) / 255.0
    if size is not None:
        img = resize(img, size, size)
    return np.ascontiguousarray(img, dtype=np.float32)


@pytest.fixture(scope="session")
def extractors() -> Extractors:
    return Extractors(ExtractorConfig())


@pytest.fixture(scope="session")
def extractors64() -> Extractors:
    return Extractors(ExtractorConfig(), dtype=torch.float64)


@pytest.fixture(scope="session")
def desk_pair() -> tuple[np.ndarray, np.ndarray]:
    """64x64 gray old photo and colour reference."""
    old = to_grayscale(skimage_color("astronaut", 64))
    ref = skimage_color("coffee", 64)
    return old, ref


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
