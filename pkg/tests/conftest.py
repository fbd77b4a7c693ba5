import numpy as np
import pytest
import torch

from partalign.config import ModelConfig
from partalign.datagen import generate_dataset

torch.set_num_threads(1)

_acceptance_lines = []


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """d=8 config small enough for finite-difference checks."""
    return ModelConfig(embed_dim=8, num_heads=2, num_parts=3, image_size=16, patch_size=4,
                       max_text_len=12, part_text_len=4, num_layers=1, mlp_ratio=2,
                       num_mim_decoder_layers=2, temperature=0.5)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    records = generate_dataset(root, num_ids=10, images_per_id=3, seed=3)
    return root, records


@pytest.fixture
def record_criterion(request):
    """Collect one pass/fail line per acceptance criterion for the summary."""

    def record(label, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {label}  {detail}".rstrip()
        _acceptance_lines.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
