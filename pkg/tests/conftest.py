import sys

import numpy as np
import pytest
import torch

from codeprior.losses import FeatureExtractor
from codeprior.vq import VQAutoencoder, VQConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def fx():
    return FeatureExtractor()


@pytest.fixture
def small_cfg():
    # three upsampling stages so every prior scale exists, kept tiny
    return VQConfig(n_codes=16, dim=8, downsample=8, base_channels=8, max_channels=32)


@pytest.fixture
def small_vq(small_cfg):
    torch.manual_seed(0)
    return VQAutoencoder(small_cfg).eval()


def random_image(rng, h=32, w=32):
    return rng.random((h, w, 3)).astype(np.float32)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.acceptance_lines():
        terminalreporter.write_line(line)
