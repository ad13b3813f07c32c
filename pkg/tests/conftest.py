import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """16 cases at 32x32, shared by the cheap model and harness tests."""
    from ichscnet.synth_data import generate_dataset

    out = tmp_path_factory.mktemp("tiny")
    return generate_dataset(16, 5, out, image_size=(32, 32))
