"""Shared fixtures and configuration for LEDA tests."""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

# Add src/ to import path
PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT / "src"))

from codebook import LlmCodebook, quantize_pyramid, synthetic_codebook  # noqa: E402
from config import AutoencoderConfig, DenoiserConfig, PhantomConfig  # noqa: E402
from ctdata import CtImage, PhantomSpec, make_pair  # noqa: E402


class StubAutoencoder(nn.Module):
    """Parameter-free autoencoder: encode is the identity, one pyramid layer."""

    def __init__(self, cb: LlmCodebook):
        super().__init__()
        self.cb = cb
        self.feature_net = None

    def encode(self, x):
        return x

    def sizes_for(self, latent_hw):
        return [tuple(int(s) for s in latent_hw)]

    def quantize(self, z):
        return quantize_pyramid(z, self.cb, self.sizes_for(z.shape[-2:]))


@pytest.fixture
def binary_codebook():
    """1-dim codebook {a: 0.0, b: 1.0}."""
    return LlmCodebook(["a", "b"], np.array([[0.0], [1.0]], dtype=np.float32))


@pytest.fixture
def stub_autoencoder(binary_codebook):
    return StubAutoencoder(binary_codebook)


@pytest.fixture
def small_codebook():
    return synthetic_codebook(64, 8, seed=3)


@pytest.fixture
def tiny_ae_config():
    """Smallest autoencoder that still exercises every block: 32x32 in, 2x2 latent."""
    return AutoencoderConfig(
        image_size=32, downsample=16, base_channels=8, res_blocks=1, attention_blocks=1,
        latent_dim=8, pyramid_depth=1, thresholds=(0.5,), disc_start=2, disc_channels=8,
        batch_size=2, steps=3, checkpoint_every=2, log_every=1, seed=0,
    )


@pytest.fixture
def tiny_denoiser_config():
    return DenoiserConfig(channels=4, kernel=3, batch_size=2, steps=3, checkpoint_every=2, log_every=1, seed=0)


@pytest.fixture
def phantom_pair():
    return make_pair(PhantomSpec(size=32, seed=5), photon_count=2e4)


@pytest.fixture
def phantom_pairs():
    return [make_pair(PhantomSpec(size=32, seed=s), photon_count=2e4) for s in range(4)]


@pytest.fixture
def small_phantom_config():
    return PhantomConfig(train_count=3, test_count=2, size=32)


@pytest.fixture
def ramp_image():
    x = np.linspace(-200.0, 300.0, 32, dtype=np.float32)
    return CtImage(id="ramp", pixels=np.tile(x, (32, 1)))


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
