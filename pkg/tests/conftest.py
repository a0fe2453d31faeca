import pytest
import torch

from wavlink.config import ModelConfig

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def tiny_cfg():
    return ModelConfig(feat_bins=3, d_model=8, audio_layers=1, text_layers=1, heads=2, ffn_mult=2,
                       vocab_size=16, max_text_len=8, proj_dim=8, matryoshka_dims=(8, 4, 2))


@pytest.fixture
def small_cfg():
    return ModelConfig(feat_bins=4, d_model=16, audio_layers=2, text_layers=2, heads=2, ffn_mult=2,
                       vocab_size=32, max_text_len=10, proj_dim=16, matryoshka_dims=(16, 8, 4, 2))


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
