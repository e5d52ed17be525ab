import numpy as np
import pytest
import torch

from toycompose.diffusion import Denoiser, DenoiserConfig, make_schedule
from toycompose.encoder import EncoderConfig, TextEncoder
from toycompose.text import default_vocabulary, load_template_bank


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def bank():
    return load_template_bank()


@pytest.fixture
def tiny_encoder(vocab):
    torch.manual_seed(0)
    return TextEncoder(EncoderConfig(len(vocab), context_length=16, d_text=16, n_layers=1, n_heads=2))


@pytest.fixture
def tiny_denoiser():
    torch.manual_seed(1)
    return Denoiser(DenoiserConfig(image_channels=3, image_size=8, channels=16, d_text=16, heads=2, T=100))


@pytest.fixture
def schedule100():
    return make_schedule(100)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
