import numpy as np
import pytest
import torch

from capbench.conformer import EncoderConfig
from capbench.featenc import FeatEncConfig
from capbench.pretrain import build_model

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfgs():
    fe = FeatEncConfig(mel_bins=80, channels=(16, 16), output_dim=16)
    enc = EncoderConfig(num_layers=2, num_heads=2, model_dim=16)
    return fe, enc


@pytest.fixture
def tiny_model(tiny_cfgs):
    model = build_model(*tiny_cfgs, seed=0)
    model.eval()
    return model


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
