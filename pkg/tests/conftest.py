"""Shared fixtures: a default schedule and deterministic toy images."""

import numpy as np
import pytest
import torch

from diffcomm import build_schedule
from diffcomm.harness import synthetic_image


@pytest.fixture(scope="session")
def schedule():
    return build_schedule(1000)


@pytest.fixture()
def toy_image():
    # 32x32 banded test pattern, values spread well inside [-1, 1]
    return synthetic_image(32, seed=7)


@pytest.fixture()
def make_images():
    def build(count, size=32, seed0=0):
        return torch.stack([synthetic_image(size, seed=seed0 + i) for i in range(count)])

    return build


@pytest.fixture()
def rng64():
    return np.random.default_rng(64)
